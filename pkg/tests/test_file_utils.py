import os

import pytest

from tswitch.utils.errors import DataError, UserError
from tswitch.utils.file_utils import atomic_output, get_num_threads, read_bytes, staged_outputs


def test_atomic_output_leaves_nothing_on_error(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with atomic_output(str(target)) as f:
            f.write(b"half")
            raise RuntimeError("interrupted")
    assert os.listdir(str(tmp_path)) == []

    with atomic_output(str(target)) as f:
        f.write(b"whole")
    assert read_bytes(str(target)) == b"whole"


def test_staged_outputs_move_together(tmp_path):
    out = tmp_path / "out"
    with staged_outputs(str(out), last=("index.json",)) as stage_dir:
        for name in ("index.json", "b.ntc", os.path.join("sub", "a.ntc")):
            path = os.path.join(stage_dir, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w") as f:
                f.write(name)
        # nothing is visible before the body finishes
        assert sorted(os.listdir(str(out))) == [os.path.basename(stage_dir)]
    assert sorted(os.listdir(str(out))) == ["b.ntc", "index.json", "sub"]
    assert (out / "sub" / "a.ntc").read_text() == os.path.join("sub", "a.ntc")


def test_staged_outputs_drop_everything_on_error(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("older run")
    with pytest.raises(DataError):
        with staged_outputs(str(out)) as stage_dir:
            with open(os.path.join(stage_dir, "partial.ntc"), "w") as f:
                f.write("x")
            raise DataError("input went missing")
    assert os.listdir(str(out)) == ["keep.txt"]


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("TSW_THREADS", "3")
    assert get_num_threads() == 3
    monkeypatch.setenv("TSW_THREADS", "0")
    assert get_num_threads() >= 1
    monkeypatch.setenv("TSW_THREADS", "many")
    with pytest.raises(UserError):
        get_num_threads()
