import json
import shutil
import subprocess
import sys

import pytest


def primary_cli() -> list[str]:
    """Command prefix for the lanefusion CLI; console script when installed,
    module invocation otherwise."""
    script = shutil.which("lanefusion")
    if script:
        return [script]
    return [sys.executable, "-m", "lanefusion"]


@pytest.fixture(scope="session")
def exported_scenes(tmp_path_factory):
    """1000 seeded scenes from the primary's export command, parsed."""
    out = tmp_path_factory.mktemp("scenes") / "scenes.jsonl"
    cmd = primary_cli() + ["export-scenes", "--count", "1000", "--seed", "0",
                           "--out", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        pytest.fail(f"scene export failed: {proc.stderr.strip()}")
    scenes = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(scenes) == 1000
    return scenes
