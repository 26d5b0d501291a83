import pytest

import tswitch.utils.log_utils as LogUtils


@pytest.fixture(autouse=True)
def reset_logging():
    LogUtils.configure()
    del LogUtils.WARNINGS_BUFFER[:]
    yield
    LogUtils.configure()
    del LogUtils.WARNINGS_BUFFER[:]


def test_info_follows_quiet_and_json_mode(capsys):
    LogUtils.log_info("hello")
    assert capsys.readouterr().out == "hello\n"

    LogUtils.configure(json_mode=True)
    LogUtils.log_info("hello")
    captured = capsys.readouterr()
    assert captured.out == ""
    assert captured.err == "hello\n"

    LogUtils.configure(quiet=True)
    LogUtils.log_info("hello")
    assert capsys.readouterr() == ("", "")


def test_warnings_are_buffered_until_flushed(capsys):
    LogUtils.configure(quiet=True)
    LogUtils.log_warning("now")
    LogUtils.log_warning("later", print_now=False)
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "now" in captured.err
    assert "later" not in captured.err
    assert len(LogUtils.WARNINGS_BUFFER) == 2

    LogUtils.flush_warnings()
    err = capsys.readouterr().err
    assert err.index("now") < err.index("later")
    assert LogUtils.WARNINGS_BUFFER == []
    LogUtils.flush_warnings()
    assert capsys.readouterr().err == ""


def test_custom_tqdm_is_silent_in_json_mode(capsys):
    LogUtils.configure(json_mode=True)
    assert list(LogUtils.custom_tqdm(range(3), desc="steps")) == [0, 1, 2]
    assert capsys.readouterr() == ("", "")


def test_print_logger_forks_stdout(tmp_path, capsys):
    path = tmp_path / "logs" / "run.log"
    with LogUtils.PrintLogger(str(path)):
        print("inside")
        LogUtils.log_info("also inside")
    print("outside")
    assert path.read_text() == "inside\nalso inside\n"
    assert capsys.readouterr().out == "inside\nalso inside\noutside\n"
