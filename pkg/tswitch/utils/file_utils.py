"""
A collection of utility functions for output files (atomic writes, staged
groups) and for the process thread cap.
"""

import contextlib
import os
import shutil
import tempfile

import torch

from tswitch.utils.errors import DataError, UserError

THREADS_ENV = "TSW_THREADS"


@contextlib.contextmanager
def atomic_output(path, mode="wb"):
    """
    Open a temporary file next to @path for writing and rename it over @path
    only if the body finishes without raising. No partially written output ever
    appears at @path.

    Args:
        path (str): final output path
        mode (str): "wb" or "w"

    Yields:
        f (file object): writable handle on the temporary file
    """
    path = os.path.abspath(os.path.expanduser(path))
    out_dir = os.path.dirname(path)
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(
        prefix=".{}.".format(os.path.basename(path)), suffix=".tmp", dir=out_dir
    )
    try:
        with os.fdopen(fd, mode) as f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


@contextlib.contextmanager
def staged_outputs(out_dir, last=()):
    """
    Stage a group of output files in a hidden directory inside @out_dir and
    move them into @out_dir once the body finishes without raising. On error
    the staging directory is removed and no file of the group appears.

    Files move in sorted relative-path order, except the relative paths in
    @last, which move after all others in the order given.

    Args:
        out_dir (str): final output directory, created if missing
        last (tuple of str): relative paths to move last, e.g. an index file

    Yields:
        stage_dir (str): directory to write the outputs into, laid out as they
            should appear under @out_dir
    """
    out_dir = os.path.abspath(os.path.expanduser(out_dir))
    os.makedirs(out_dir, exist_ok=True)
    stage_dir = tempfile.mkdtemp(prefix=".stage.", suffix=".tmp", dir=out_dir)
    try:
        yield stage_dir
        staged = []
        for root, _, files in os.walk(stage_dir):
            staged.extend(os.path.relpath(os.path.join(root, f), stage_dir) for f in files)
        staged = sorted(rel for rel in staged if rel not in last) + [rel for rel in last if rel in staged]
        for rel in staged:
            target = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            os.replace(os.path.join(stage_dir, rel), target)
    finally:
        shutil.rmtree(stage_dir, ignore_errors=True)


def write_bytes_atomic(path, payload):
    with atomic_output(path, "wb") as f:
        f.write(payload)


def write_text_atomic(path, text):
    with atomic_output(path, "w") as f:
        f.write(text)


def read_bytes(path):
    """
    Reads a whole input file. A missing file surfaces as a DataError so the
    command line reports it with the data-error exit code.
    """
    path = os.path.expanduser(path)
    if not os.path.isfile(path):
        raise DataError("no such file: {}".format(path), code="MISSING_FILE")
    with open(path, "rb") as f:
        return f.read()


def get_num_threads():
    """
    Thread cap from TSW_THREADS (0 or unset means all cores).
    """
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UserError("{} must be an integer, got {!r}".format(THREADS_ENV, raw))
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def apply_thread_cap():
    n = get_num_threads()
    torch.set_num_threads(n)
    return n


@contextlib.contextmanager
def single_threaded():
    """
    Run the body with one torch thread so reductions happen in a fixed order.
    """
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)
