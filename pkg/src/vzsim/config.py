"""Hierarchical configuration with layered files and change notification.

Sections are addressed by slash paths (``server/policy/overload``).  Files
are INI syntax; values may be integers, decimals, text or Python-style map
literals such as ``{'threshold':0.80}``.  Layers loaded later override
earlier ones option by option.
"""

from __future__ import annotations

import ast
import configparser
import copy
import itertools
import logging
import os
import re
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

log = logging.getLogger(__name__)

DEFAULTS_RESOURCE = "defaults.conf"
LAYER_FILENAME = "vzsim-server.conf"

# (section, option) pairs that only take effect after a restart
IMMUTABLE_OPTIONS = frozenset({("server/policy", "state_loader")})

_INT_RE = re.compile(r"[+-]?\d+\Z")
_FLOAT_RE = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?\Z")


class ConfigError(Exception):
    pass


class ParseError(ConfigError):
    def __init__(self, filename: str, lineno: int | None, message: str):
        self.filename = filename
        self.lineno = lineno
        where = f"{filename}:{lineno}" if lineno else filename
        super().__init__(f"{where}: {message}")


class UnknownSection(ConfigError, KeyError):
    pass


class ImmutableOption(ConfigError):
    pass


def norm_path(path: str) -> str:
    return "/".join(p for p in path.strip().split("/") if p)


def covers(prefix: str, path: str) -> bool:
    prefix, path = norm_path(prefix), norm_path(path)
    return prefix == "" or path == prefix or path.startswith(prefix + "/")


def parse_value(text: str) -> Any:
    text = text.strip()
    if _INT_RE.match(text):
        return int(text)
    if _FLOAT_RE.match(text):
        return float(text)
    if text[:1] in "{[(" or (len(text) >= 2 and text[0] == text[-1] and text[0] in "'\""):
        return ast.literal_eval(text)
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        raise TypeError("booleans are not a supported option type")
    if isinstance(value, (int, float, dict, list, tuple)):
        return repr(value)
    text = str(value)
    try:
        reparsed = parse_value(text)
    except (ValueError, SyntaxError):
        reparsed = None
    if reparsed != text or text != text.strip() or "\n" in text:
        return repr(text)
    return text


class ConfigTree:
    """Sections of option/value maps, keyed by normalized slash path."""

    def __init__(self, sections: Mapping[str, Mapping[str, Any]] | None = None):
        self._sections: dict[str, dict[str, Any]] = {}
        for path, opts in (sections or {}).items():
            self._sections[norm_path(path)] = copy.deepcopy(dict(opts))

    def __eq__(self, other):
        return isinstance(other, ConfigTree) and self._sections == other._sections

    def __repr__(self):
        return f"ConfigTree({self._sections!r})"

    def __contains__(self, path: str) -> bool:
        return norm_path(path) in self._sections

    def sections(self) -> list[str]:
        return sorted(self._sections)

    def options(self, path: str) -> dict[str, Any]:
        try:
            return copy.deepcopy(self._sections[norm_path(path)])
        except KeyError:
            raise UnknownSection(path) from None

    def get(self, path: str, option: str, default: Any = ...) -> Any:
        sec = self._sections.get(norm_path(path))
        if sec is None or option not in sec:
            if default is ...:
                raise KeyError(f"{path}:{option}")
            return default
        return copy.deepcopy(sec[option])

    def has_prefix(self, path: str) -> bool:
        return any(covers(path, s) for s in self._sections)

    def subtree(self, path: str) -> "ConfigTree":
        if not self.has_prefix(path):
            raise UnknownSection(path)
        return ConfigTree({s: o for s, o in self._sections.items() if covers(path, s)})

    def merged(self, other: "ConfigTree") -> "ConfigTree":
        out = ConfigTree(self._sections)
        for path, opts in other._sections.items():
            out._sections.setdefault(path, {}).update(copy.deepcopy(opts))
        return out

    def with_value(self, path: str, option: str, value: Any) -> "ConfigTree":
        out = ConfigTree(self._sections)
        out._sections.setdefault(norm_path(path), {})[option] = copy.deepcopy(value)
        return out

    def items(self) -> Iterable[tuple[str, str, Any]]:
        for path in self.sections():
            for opt, val in self._sections[path].items():
                yield path, opt, copy.deepcopy(val)

    def to_text(self) -> str:
        out = []
        for path in self.sections():
            out.append(f"[{path}]")
            out.extend(f"{opt}={format_value(v)}" for opt, v in self._sections[path].items())
            out.append("")
        return "\n".join(out)


def parse_text(text: str, filename: str = "<string>") -> ConfigTree:
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, comment_prefixes=("#", ";"),
        inline_comment_prefixes=None, default_section="\0defaults",
        empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=filename)
    except configparser.MissingSectionHeaderError as e:
        raise ParseError(filename, e.lineno, "option outside of any section") from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ParseError(filename, lineno, "malformed line") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ParseError(filename, e.lineno, str(e.message if hasattr(e, "message") else e)) from None

    lines = text.splitlines()
    sections: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        opts = sections.setdefault(norm_path(name), {})
        for opt, raw in parser.items(name, raw=True):
            try:
                opts[opt] = parse_value(raw)
            except (ValueError, SyntaxError):
                raise ParseError(filename, _find_line(lines, opt),
                                 f"bad value for {opt!r}: {raw!r}") from None
    return ConfigTree(sections)


def _find_line(lines: list[str], option: str) -> int | None:
    pat = re.compile(rf"\s*{re.escape(option)}\s*[=:]")
    for i, line in enumerate(lines, 1):
        if pat.match(line):
            return i
    return None


def parse_file(path: str | os.PathLike) -> ConfigTree:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def defaults_path() -> Path:
    return Path(str(resources.files("vzsim") / "data" / DEFAULTS_RESOURCE))


def default_layer_paths(install_dir: str | os.PathLike | None = None) -> list[Path]:
    """Packaged defaults, then installation, system and user files."""
    install = Path(install_dir) if install_dir else Path.cwd()
    return [
        defaults_path(),
        install / LAYER_FILENAME,
        Path("/etc") / LAYER_FILENAME,
        Path.home() / f".{LAYER_FILENAME}",
    ]


def load_layers(paths: Iterable[str | os.PathLike]) -> ConfigTree:
    paths = [Path(p) for p in paths]
    if not paths or not paths[0].is_file():
        raise FileNotFoundError(f"defaults layer missing: {paths[0] if paths else None}")
    tree = ConfigTree()
    for p in paths:
        try:
            text = p.read_text(encoding="utf-8")
        except OSError:
            log.debug("skipping unreadable config layer %s", p)
            continue
        tree = tree.merged(parse_text(text, str(p)))
    return tree


def get_section(tree: ConfigTree, path: str) -> ConfigTree:
    return tree.subtree(path)


@dataclass(frozen=True)
class ConfigChange:
    seq: int
    path: str
    option: str
    old: Any
    new: Any

    def as_dict(self) -> dict:
        return {"seq": self.seq, "path": self.path, "option": self.option,
                "old": self.old, "new": self.new}


@dataclass(frozen=True)
class ConfigSubscription:
    observer_id: str
    prefix: str
    callback: Callable[[ConfigChange], None]


class ConfigManager:
    """Committed configuration plus the observers interested in it.

    Readers see an immutable snapshot; writes go through one lock, which
    also keeps notification order identical to commit order.
    """

    def __init__(self, tree: ConfigTree | None = None):
        self._tree = tree or ConfigTree()
        self._subs: list[ConfigSubscription] = []
        self._lock = threading.RLock()
        self._seq = itertools.count(1)
        self._ids = itertools.count(1)

    @classmethod
    def from_layers(cls, paths: Iterable[str | os.PathLike]) -> "ConfigManager":
        return cls(load_layers(paths))

    @property
    def tree(self) -> ConfigTree:
        return self._tree

    def get(self, path: str, option: str, default: Any = ...) -> Any:
        return self._tree.get(path, option, default)

    def get_section(self, path: str) -> ConfigTree:
        return self._tree.subtree(path)

    def subscribe(self, prefix: str, callback: Callable[[ConfigChange], None],
                  observer_id: str | None = None) -> ConfigSubscription:
        sub = ConfigSubscription(observer_id or f"observer-{next(self._ids)}",
                                 norm_path(prefix), callback)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: ConfigSubscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def set_value(self, path: str, option: str, value: Any) -> ConfigChange | None:
        path = norm_path(path)
        if (path, option) in IMMUTABLE_OPTIONS:
            raise ImmutableOption(f"{path}:{option} requires a restart to change")
        with self._lock:
            old = self._tree.get(path, option, None)
            if path in self._tree and old == value and option in self._tree.options(path):
                return None
            self._tree = self._tree.with_value(path, option, value)
            change = ConfigChange(next(self._seq), path, option, old, copy.deepcopy(value))
            for sub in list(self._subs):
                if covers(sub.prefix, path):
                    sub.callback(change)
            return change

    def apply_tree(self, layer: ConfigTree) -> list[ConfigChange]:
        """Commit every option of ``layer`` that differs from the current value."""
        changes = []
        for path, option, value in layer.items():
            if (path, option) in IMMUTABLE_OPTIONS:
                if self._tree.get(path, option, None) != value:
                    log.warning("ignoring %s:%s; it requires a restart", path, option)
                continue
            ch = self.set_value(path, option, value)
            if ch is not None:
                changes.append(ch)
        return changes

    def apply_layer(self, path: str | os.PathLike) -> list[ConfigChange]:
        return self.apply_tree(parse_file(path))
