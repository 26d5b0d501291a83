"""
Nested attribute-dict used for every bench config. Keys can be read and
written as attributes, missing intermediate sections are created on first
access, and the whole tree can be locked so that a JSON override with a
misspelled key fails loudly instead of being silently ignored.

Follows the addict design: https://github.com/mewwts/addict
"""

import contextlib
import copy
import json

from tswitch.utils.errors import UserError
from tswitch.utils.file_utils import write_text_atomic

_KEY_LOCKED = "_Config__key_locked"
_ALL_LOCKED = "_Config__all_locked"
_PARENT = "_Config__parent"
_KEY = "_Config__key"


class Config(dict):
    def __init__(self, *args, **kwargs):
        object.__setattr__(self, _KEY_LOCKED, False)
        object.__setattr__(self, _ALL_LOCKED, False)
        object.__setattr__(self, _PARENT, kwargs.pop("_parent", None))
        object.__setattr__(self, _KEY, kwargs.pop("_key", None))
        for arg in args:
            if arg:
                for key, val in dict(arg).items():
                    self[key] = self._hook(val)
        for key, val in kwargs.items():
            self[key] = self._hook(val)

    @classmethod
    def _hook(cls, item):
        # nested dicts become plain Config sections, never subclasses
        if isinstance(item, dict) and not isinstance(item, Config):
            return Config(item)
        if isinstance(item, (list, tuple)):
            return type(item)(Config._hook(elem) for elem in item)
        return item

    # locking

    @property
    def is_locked(self):
        return object.__getattribute__(self, _ALL_LOCKED)

    @property
    def is_key_locked(self):
        return object.__getattribute__(self, _KEY_LOCKED)

    def _sections(self):
        return [v for v in self.values() if isinstance(v, Config)]

    def lock(self):
        """
        No new keys and no value updates, recursively.
        """
        object.__setattr__(self, _ALL_LOCKED, True)
        object.__setattr__(self, _KEY_LOCKED, True)
        for sub in self._sections():
            sub.lock()

    def lock_keys(self):
        """
        Values may still change, but new keys cannot be added.
        """
        object.__setattr__(self, _KEY_LOCKED, True)
        for sub in self._sections():
            sub.lock_keys()

    def unlock(self):
        object.__setattr__(self, _ALL_LOCKED, False)
        object.__setattr__(self, _KEY_LOCKED, False)
        for sub in self._sections():
            sub.unlock()

    @contextlib.contextmanager
    def values_unlocked(self):
        """
        Scope in which existing values can be overwritten but no key can be
        added. The previous lock level is restored on exit.
        """
        was_locked, was_key_locked = self.is_locked, self.is_key_locked
        self.unlock()
        self.lock_keys()
        try:
            yield self
        finally:
            if was_locked:
                self.lock()
            elif not was_key_locked:
                self.unlock()

    # access

    def __getattr__(self, name):
        if name.startswith("__"):
            raise AttributeError(name)
        return self[name]

    def __getitem__(self, name):
        if name not in self:
            if self.is_key_locked:
                raise UserError("unknown config key {!r}".format(name))
            return Config(_parent=self, _key=name)
        return super(Config, self).__getitem__(name)

    def __setattr__(self, name, value):
        self[name] = value

    def __setitem__(self, name, value):
        if self.is_locked:
            raise UserError("config is locked; cannot set {!r}".format(name))
        if self.is_key_locked and name not in self:
            raise UserError("unknown config key {!r}".format(name))
        super(Config, self).__setitem__(name, value)
        parent = object.__getattribute__(self, _PARENT)
        if parent is not None:
            # attach a lazily created section to its parent on first write
            parent[object.__getattribute__(self, _KEY)] = self
            object.__setattr__(self, _PARENT, None)

    def __delattr__(self, name):
        del self[name]

    def update(self, *args, **kwargs):
        """
        Recursive update from another config or nested dict. Under a key lock,
        keys missing from this config are rejected.
        """
        other = dict(*args, **kwargs)
        for key, val in other.items():
            if isinstance(val, dict) and isinstance(self.get(key), Config):
                self[key].update(val)
            else:
                self[key] = self._hook(val)

    # serialization

    def to_dict(self):
        out = {}
        for key, val in self.items():
            if isinstance(val, Config):
                out[key] = val.to_dict()
            elif isinstance(val, (list, tuple)):
                out[key] = type(val)(v.to_dict() if isinstance(v, Config) else v for v in val)
            else:
                out[key] = val
        return out

    def __repr__(self):
        return json.dumps(self.to_dict(), indent=4)

    def __deepcopy__(self, memo):
        other = Config()
        memo[id(self)] = other
        for key, val in self.items():
            other[key] = copy.deepcopy(val, memo)
        return other

    def deepcopy(self):
        return copy.deepcopy(self)

    def dump(self, filename=None):
        """
        Returns the config as a json string and optionally writes it to @filename.
        """
        json_string = json.dumps(self.to_dict(), indent=4)
        if filename is not None:
            write_text_atomic(filename, json_string)
        return json_string
