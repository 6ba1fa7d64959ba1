import json
import os
import sys
import tempfile
import traceback
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import markdown

from app_paths import LOG_FILE

_log_file: Path | None = None


def now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def slug(s: str) -> str:
    return "-".join((s or "").strip().lower().split())


@dataclass(frozen=True)
class JsonLoadResult:
    """Outcome of reading a JSON document: ``valid``, ``missing`` or ``invalid``."""

    path: Path
    status: str
    data: Any = None
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.status == "valid"

    @property
    def missing(self) -> bool:
        return self.status == "missing"


def load_json(path: Path) -> JsonLoadResult:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        return JsonLoadResult(path, "missing")
    except OSError as error:
        return JsonLoadResult(path, "invalid", error=str(error))
    try:
        document = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        return JsonLoadResult(path, "invalid", error=str(error))
    return JsonLoadResult(path, "valid", data=document)


def parse_override_value(text: str) -> Any:
    """Interpret a ``--set`` value as JSON when it parses, else as a plain string."""
    try:
        return json.loads(text)
    except (TypeError, ValueError):
        return text


def atomic_write_bytes(path: Path, data: bytes):
    """Write through a sibling temp file renamed over ``path``; readers see the
    old file or the new one, never a partial write."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, staging = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".part")
    staging = Path(staging)
    try:
        with os.fdopen(handle, "wb") as out:
            out.write(data)
            out.flush()
            os.fsync(out.fileno())
        staging.replace(path)
    except BaseException:
        staging.unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str, encoding: str = "utf-8"):
    atomic_write_bytes(path, text.encode(encoding))


def write_json(path: Path, data: Any):
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


def render_markdown_page(text: str, css: str, title: str = "") -> str:
    body = markdown.markdown(text, extensions=["tables"])
    return f"<html><head><title>{title}</title>{css}</head><body>{body}</body></html>"


def set_log_file(path: Path | None):
    """Redirect the run log; None restores the default location."""
    global _log_file
    _log_file = Path(path) if path is not None else None


def current_log_file() -> Path:
    override = os.environ.get("MNL_LAB_LOG")
    if override:
        return Path(override)
    return _log_file or LOG_FILE


def run_log(message: str, error: BaseException | None = None, echo: bool = False):
    """Append a timestamped diagnostic line; logging never raises."""
    detail = f"[{now_iso()}] {message}"
    if error is not None:
        detail += f": {type(error).__name__}: {error}"
        formatted = "".join(
            traceback.format_exception(type(error), error, error.__traceback__)
        ).strip()
        if formatted:
            detail += f"\n{formatted}"
    if echo:
        print(detail, file=sys.stderr)
    try:
        target = current_log_file()
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("a", encoding="utf-8") as stream:
            stream.write(detail + "\n")
    except Exception:
        pass
