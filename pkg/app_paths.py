import os
from pathlib import Path


def resolve_runtime_dir(module_file: str | Path, override: str | None = None) -> Path:
    """Resolve the writable root from the module location, never from the CWD."""
    if override:
        return Path(override).expanduser().resolve()
    return Path(module_file).resolve().parent


APP_DIR = resolve_runtime_dir(__file__)
DATA_DIR = resolve_runtime_dir(__file__, os.environ.get("MNL_LAB_HOME"))

CONFIG_FP = APP_DIR / "config.json"
PRESETS_DIR = APP_DIR / "presets"

RESULTS_DIR = DATA_DIR / "results"
LOG_FILE = DATA_DIR / "results" / "mnl_lab.log"
