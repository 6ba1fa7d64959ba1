import pytest

from helpers import (
    atomic_write_text,
    load_json,
    parse_override_value,
    render_markdown_page,
    run_log,
    set_log_file,
    slug,
    write_json,
)


class TestLoadJson:
    def test_statuses(self, tmp_path):
        assert load_json(tmp_path / "absent.json").missing
        (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
        bad = load_json(tmp_path / "bad.json")
        assert bad.status == "invalid" and bad.error
        write_json(tmp_path / "good.json", {"a": [1, 2]})
        good = load_json(tmp_path / "good.json")
        assert good.valid and good.data == {"a": [1, 2]}


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "nested" / "out.txt"
    atomic_write_text(target, "first")
    atomic_write_text(target, "second")
    assert target.read_text(encoding="utf-8") == "second"
    assert [p.name for p in target.parent.iterdir()] == ["out.txt"]


@pytest.mark.parametrize("text, expected", [
    ("3", 3),
    ("0.5", 0.5),
    ("true", True),
    ("[1, 2]", [1, 2]),
    ("null", None),
    ("fast", "fast"),
])
def test_parse_override_value(text, expected):
    assert parse_override_value(text) == expected


def test_slug():
    assert slug("  Gaussian  Realizable N100 ") == "gaussian-realizable-n100"
    assert slug("") == ""


class TestRunLog:
    def test_appends_with_traceback(self, tmp_path, monkeypatch):
        monkeypatch.delenv("MNL_LAB_LOG", raising=False)
        set_log_file(tmp_path / "run.log")
        try:
            try:
                raise ValueError("boom")
            except ValueError as error:
                run_log("step failed", error)
            run_log("second line")
        finally:
            set_log_file(None)
        text = (tmp_path / "run.log").read_text(encoding="utf-8")
        assert "step failed: ValueError: boom" in text
        assert "Traceback" in text
        assert text.rstrip().endswith("second line")

    def test_env_override_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MNL_LAB_LOG", str(tmp_path / "env.log"))
        set_log_file(tmp_path / "ignored.log")
        try:
            run_log("hello")
        finally:
            set_log_file(None)
        assert "hello" in (tmp_path / "env.log").read_text(encoding="utf-8")
        assert not (tmp_path / "ignored.log").exists()

    def test_never_raises(self, tmp_path, monkeypatch):
        blocker = tmp_path / "file"
        blocker.write_text("x", encoding="utf-8")
        monkeypatch.setenv("MNL_LAB_LOG", str(blocker / "inside" / "run.log"))
        run_log("unwritable")


def test_render_markdown_page():
    page = render_markdown_page("| a | b |\n|---|---|\n| 1 | 2 |\n", "<style></style>", "Audit")
    assert "<table>" in page
    assert "<title>Audit</title>" in page
