"""Tagged parameter trees, sub-network selectors and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    [8-byte magic "RVTCKPT1"][u32 meta_len][meta JSON][u32 index_len][index JSON][payload]

The payload is the concatenation of every entry as raw little-endian f32, in
index order. Index offsets are relative to the start of the payload.
"""

from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .tensor import Tensor

PARTS = ("encoder", "decoder")
BLOCKS = ("patch_embed", "attention", "mixffn", "conv_block", "head", "other")
LAYERS = ("conv", "fc", "norm", "other")

MAGIC = b"RVTCKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


@dataclass(frozen=True)
class Tags:
    part: str
    block: str
    layer: str

    def __post_init__(self):
        if self.part not in PARTS:
            raise ValueError(f"unknown part tag {self.part!r}")
        if self.block not in BLOCKS:
            raise ValueError(f"unknown block tag {self.block!r}")
        if self.layer not in LAYERS:
            raise ValueError(f"unknown layer tag {self.layer!r}")


class ParamTree:
    """Ordered mapping ``path -> Tensor`` with one :class:`Tags` per entry.

    Iteration is lexicographic by path. Trees are treated as immutable values;
    use :meth:`replace` to derive a new tree with different arrays.
    """

    def __init__(self, entries: Mapping[str, tuple[Tensor, Tags]] | None = None):
        self._tensors: dict[str, Tensor] = {}
        self._tags: dict[str, Tags] = {}
        for path in sorted(entries or {}):
            tensor, tags = entries[path]
            self._tensors[path] = tensor
            self._tags[path] = tags

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], tags: Mapping[str, Tags]) -> ParamTree:
        if set(arrays) != set(tags):
            raise ValueError("arrays and tags must cover the same paths")
        return cls({p: (Tensor(np.asarray(a, dtype=np.float32)), tags[p]) for p, a in arrays.items()})

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def paths(self) -> list[str]:
        return list(self._tensors)

    def tags(self, path: str) -> Tags:
        return self._tags[path]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def array(self, path: str) -> np.ndarray:
        return self._tensors[path].data

    def arrays(self) -> dict[str, np.ndarray]:
        return {p: t.data for p, t in self._tensors.items()}

    def tag_map(self) -> dict[str, Tags]:
        return dict(self._tags)

    def replace(self, arrays: Mapping[str, np.ndarray]) -> ParamTree:
        """New tree with the given paths swapped for new arrays (shapes must match)."""
        entries = {}
        for path, tensor in self._tensors.items():
            if path in arrays:
                arr = np.asarray(arrays[path], dtype=np.float32)
                if arr.shape != tensor.shape:
                    raise ValueError(f"{path}: shape {arr.shape} != {tensor.shape}")
                tensor = Tensor(arr)
            entries[path] = (tensor, self._tags[path])
        unknown = set(arrays) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown paths: {sorted(unknown)[:3]}")
        return ParamTree(entries)

    def copy(self) -> ParamTree:
        return ParamTree({p: (Tensor(t.data.copy()), self._tags[p]) for p, t in self._tensors.items()})

    def subset(self, paths: Iterable[str]) -> ParamTree:
        return ParamTree({p: (self._tensors[p], self._tags[p]) for p in paths})

    def structure(self) -> list[tuple[str, tuple[int, ...], Tags]]:
        return [(p, t.shape, self._tags[p]) for p, t in self._tensors.items()]

    def same_bytes(self, other: ParamTree) -> bool:
        if self.structure() != other.structure():
            return False
        return all(np.array_equal(self.array(p), other.array(p)) for p in self)


def param_count(tree: ParamTree) -> int:
    return sum(int(np.prod(tree[p].shape, dtype=np.int64)) for p in tree)


# ------------------------------------------------------------------ selectors


class Selector:
    """Predicate over a parameter's tags (and optionally its path).

    Leaf selectors compare tag values; ``&``, ``|`` and ``~`` compose them.
    """

    def matches(self, path: str, tags: Tags) -> bool:
        raise NotImplementedError

    def __and__(self, other: Selector) -> Selector:
        return _And(self, other)

    def __or__(self, other: Selector) -> Selector:
        return _Or(self, other)

    def __invert__(self) -> Selector:
        return _Not(self)


@dataclass(frozen=True)
class Match(Selector):
    part: str | None = None
    block: str | None = None
    layer: str | None = None
    glob: str | None = None

    def matches(self, path: str, tags: Tags) -> bool:
        return ((self.part is None or tags.part == self.part)
                and (self.block is None or tags.block == self.block)
                and (self.layer is None or tags.layer == self.layer)
                and (self.glob is None or fnmatch.fnmatchcase(path, self.glob)))

    def __str__(self) -> str:
        terms = [f"{k}=={v}" for k, v in (("part", self.part), ("block", self.block),
                                            ("layer", self.layer), ("path", self.glob)) if v is not None]
        return " & ".join(terms) if terms else "all"


@dataclass(frozen=True)
class _And(Selector):
    left: Selector
    right: Selector

    def matches(self, path, tags):
        return self.left.matches(path, tags) and self.right.matches(path, tags)

    def __str__(self):
        return f"({self.left} & {self.right})"


@dataclass(frozen=True)
class _Or(Selector):
    left: Selector
    right: Selector

    def matches(self, path, tags):
        return self.left.matches(path, tags) or self.right.matches(path, tags)

    def __str__(self):
        return f"({self.left} | {self.right})"


@dataclass(frozen=True)
class _Not(Selector):
    inner: Selector

    def matches(self, path, tags):
        return not self.inner.matches(path, tags)

    def __str__(self):
        return f"!{self.inner}"


ALL = Match()
ENCODER = Match(part="encoder")
DECODER = Match(part="decoder")


def parse_selector(text: str) -> Selector:
    """Parse ``"part==encoder & layer==conv"``-style selector text.

    Grammar: ``|``-separated alternatives of ``&``-separated terms; a term is
    ``key==value``, ``!term``, ``all`` or a parenthesised expression.
    """
    tokens = _tokenize(text)
    sel, pos = _parse_or(tokens, 0)
    if pos != len(tokens):
        raise ValueError(f"unexpected token {tokens[pos]!r} in selector {text!r}")
    return sel


def _tokenize(text: str) -> list[str]:
    out, buf = [], ""
    for ch in text:
        if ch in "&|!()":
            if buf.strip():
                out.append(buf.strip())
            out.append(ch)
            buf = ""
        else:
            buf += ch
    if buf.strip():
        out.append(buf.strip())
    return out


def _parse_or(tokens, pos):
    left, pos = _parse_and(tokens, pos)
    while pos < len(tokens) and tokens[pos] == "|":
        right, pos = _parse_and(tokens, pos + 1)
        left = left | right
    return left, pos


def _parse_and(tokens, pos):
    left, pos = _parse_term(tokens, pos)
    while pos < len(tokens) and tokens[pos] == "&":
        right, pos = _parse_term(tokens, pos + 1)
        left = left & right
    return left, pos


def _parse_term(tokens, pos):
    if pos >= len(tokens):
        raise ValueError("selector ends unexpectedly")
    tok = tokens[pos]
    if tok == "!":
        inner, pos = _parse_term(tokens, pos + 1)
        return ~inner, pos
    if tok == "(":
        inner, pos = _parse_or(tokens, pos + 1)
        if pos >= len(tokens) or tokens[pos] != ")":
            raise ValueError("unbalanced parentheses in selector")
        return inner, pos + 1
    if tok == "all":
        return ALL, pos + 1
    key, sep, value = tok.partition("==")
    key, value = key.strip(), value.strip()
    if not sep or key not in ("part", "block", "layer", "path"):
        raise ValueError(f"bad selector term {tok!r}")
    allowed = {"part": PARTS, "block": BLOCKS, "layer": LAYERS}.get(key)
    if allowed is not None and value not in allowed:
        raise ValueError(f"unknown {key} value {value!r}")
    field_name = "glob" if key == "path" else key
    return Match(**{field_name: value}), pos + 1


def select(tree: ParamTree, selector: Selector) -> list[str]:
    return [p for p in tree if selector.matches(p, tree.tags(p))]


# ----------------------------------------------------------------- checkpoint


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save(tree: ParamTree, meta: Mapping | None = None) -> bytes:
    if len(tree) == 0:
        raise ValueError("cannot save an empty parameter tree")
    index, chunks, offset = [], [], 0
    for path in tree:
        arr = np.ascontiguousarray(tree.array(path), dtype="<f4")
        raw = arr.tobytes()
        tags = tree.tags(path)
        index.append({"path": path, "part": tags.part, "block": tags.block, "layer": tags.layer,
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta_b = _json_bytes(dict(meta or {}))
    index_b = _json_bytes(index)
    header = MAGIC + str(VERSION).encode() + struct.pack("<I", len(meta_b)) + meta_b \
        + struct.pack("<I", len(index_b)) + index_b
    return header + b"".join(chunks)


def _read_header(read) -> tuple[dict, list[dict], int]:
    """Parse the header via ``read(n)``; returns meta, index and header size."""
    magic = read(8)
    if len(magic) < 8 or magic[:7] != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    try:
        version = int(magic[7:8].decode())
    except ValueError:
        raise CheckpointFormatError("bad checkpoint version byte") from None
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    size = 8
    blocks = []
    for what in ("meta", "index"):
        raw_len = read(4)
        if len(raw_len) < 4:
            raise CheckpointFormatError(f"truncated {what} length")
        (n,) = struct.unpack("<I", raw_len)
        raw = read(n)
        if len(raw) < n:
            raise CheckpointFormatError(f"truncated {what} block")
        try:
            blocks.append(json.loads(raw.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt {what} block: {exc}") from None
        size += 4 + n
    meta, index = blocks
    _validate_index(index)
    return meta, index, size


def _validate_index(index: list[dict]) -> None:
    end = 0
    seen = set()
    for entry in index:
        if entry["path"] in seen:
            raise CheckpointFormatError(f"duplicate path {entry['path']!r} in index")
        seen.add(entry["path"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if entry["nbytes"] != n:
            raise CheckpointFormatError(f"{entry['path']}: nbytes does not match shape")
        if entry["offset"] < end:
            raise CheckpointFormatError(f"{entry['path']}: overlapping or unordered offset")
        end = entry["offset"] + n


def _entry_tree(index, fetch, selector: Selector | None) -> ParamTree:
    entries = {}
    for e in index:
        tags = Tags(e["part"], e["block"], e["layer"])
        if selector is not None and not selector.matches(e["path"], tags):
            continue
        raw = fetch(e["offset"], e["nbytes"])
        if len(raw) < e["nbytes"]:
            raise CheckpointFormatError(f"truncated payload at {e['path']}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
        entries[e["path"]] = (Tensor(arr), tags)
    return ParamTree(entries)


def load(data: bytes, selector: Selector | None = None) -> tuple[ParamTree, dict]:
    """Decode checkpoint bytes; ``selector`` restricts which entries are materialised."""
    view = memoryview(data)
    pos = 0

    def read(n):
        nonlocal pos
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    meta, index, start = _read_header(read)
    if index:
        last = index[-1]
        if start + last["offset"] + last["nbytes"] > len(data):
            raise CheckpointFormatError("truncated payload")
    tree = _entry_tree(index, lambda off, n: bytes(view[start + off:start + off + n]), selector)
    return tree, meta


def write_checkpoint(path: str | Path, tree: ParamTree, meta: Mapping | None = None) -> None:
    Path(path).write_bytes(save(tree, meta))


def read_checkpoint(path: str | Path, selector: Selector | None = None) -> tuple[ParamTree, dict]:
    """Load from disk, seeking past unselected entries."""
    with open(path, "rb") as fh:
        meta, index, start = _read_header(fh.read)

        def fetch(off, n):
            fh.seek(start + off)
            return fh.read(n)

        tree = _entry_tree(index, fetch, selector)
    return tree, meta


@dataclass
class Checkpoint:
    tree: ParamTree
    meta: dict

    def to_bytes(self) -> bytes:
        return save(self.tree, self.meta)

    @classmethod
    def from_bytes(cls, data: bytes, selector: Selector | None = None) -> Checkpoint:
        return cls(*load(data, selector))

    def write(self, path: str | Path) -> None:
        write_checkpoint(path, self.tree, self.meta)

    @classmethod
    def read(cls, path: str | Path, selector: Selector | None = None) -> Checkpoint:
        return cls(*read_checkpoint(path, selector))
