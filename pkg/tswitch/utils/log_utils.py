"""
Console logging helpers with the interface of robomimic.utils.log_utils
(PrintLogger, custom_tqdm, log_warning, flush_warnings), kept local so the
package does not pull in robomimic and its tensorboard / EGL dependencies.

Output stays plain `print` text with colored warnings and tqdm progress bars.
In json mode human text goes to stderr, so stdout only ever carries the
single JSON result object.
"""

import os
import sys
import textwrap

from termcolor import colored
from tqdm import tqdm

# warnings collected during a run, printed again by flush_warnings
WARNINGS_BUFFER = []

_STATE = {"quiet": False, "json_mode": False}


def configure(quiet=False, json_mode=False):
    _STATE["quiet"] = bool(quiet)
    _STATE["json_mode"] = bool(json_mode)


def is_quiet():
    return _STATE["quiet"]


def _stream():
    return sys.stderr if _STATE["json_mode"] else sys.stdout


def log_info(message):
    if _STATE["quiet"]:
        return
    print(message, file=_stream())


def log_section(title):
    """
    Prints a banner like the ones the training scripts use, e.g.
    ============= Training Dataset =============
    """
    log_info("\n============= {} =============".format(title))


def log_warning(message, color="yellow", print_now=True):
    """
    This function logs a warning message by recording it in a global warning buffer.
    The global registry will be maintained until @flush_warnings is called, at
    which point the warnings will get printed to the terminal.

    Warnings are shown even in quiet mode and always go to stderr.

    Args:
        message (str): warning message to display
        color (str): color of message - defaults to "yellow"
        print_now (bool): if True (default), will print to terminal immediately, in
            addition to adding it to the global warning buffer
    """
    buffer_message = colored("WARNING: {}".format(textwrap.indent(message, "    ").lstrip()), color)
    WARNINGS_BUFFER.append(buffer_message)
    if print_now:
        print(buffer_message, file=sys.stderr)


def flush_warnings():
    """
    This function flushes all warnings from the global warning buffer to the terminal and
    clears the global registry.
    """
    for msg in WARNINGS_BUFFER:
        print(msg, file=sys.stderr)
    del WARNINGS_BUFFER[:]


def log_error(message):
    print(colored("ERROR: {}".format(message), "red"), file=sys.stderr)


class custom_tqdm(tqdm):
    """
    Small extension to tqdm to make a few changes from default behavior.
    By default tqdm writes to stderr. Instead, we change it to write
    to the human-text stream so the bar lands in the PrintLogger record, and
    we switch it off entirely in quiet and json mode.
    """

    def __init__(self, *args, **kwargs):
        assert "file" not in kwargs
        kwargs.setdefault("leave", False)
        kwargs["disable"] = kwargs.get("disable", False) or _STATE["quiet"] or _STATE["json_mode"]
        super(custom_tqdm, self).__init__(*args, file=_stream(), **kwargs)


class PrintLogger(object):
    """
    This class redirects print statements to both console and a file.
    Usable as `sys.stdout = PrintLogger(path)` or as a context manager, which
    restores stdout and closes the file on exit.
    """

    def __init__(self, log_file):
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        self.terminal = sys.stdout
        self.log_file = open(log_file, "a")

    def write(self, message):
        self.terminal.write(message)
        self.log_file.write(message)
        self.log_file.flush()

    def flush(self):
        self.terminal.flush()

    def close(self):
        self.log_file.close()

    def __enter__(self):
        sys.stdout = self
        return self

    def __exit__(self, exc_type, exc, tb):
        sys.stdout = self.terminal
        self.close()
        return False
