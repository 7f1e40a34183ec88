"""Shared helper: run ``mlam <command>`` with a one-key config for a preset experiment."""

import json
import tempfile
from pathlib import Path


def run_kind(main, command: str, kind: str, argv: list[str]) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / f"{kind}.json"
        cfg.write_text(json.dumps({"kind": kind}))
        if "--out" not in argv:
            argv = [*argv, "--out", f"results/{kind}"]
        return main([command, "--config", str(cfg), *argv])
