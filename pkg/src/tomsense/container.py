"""Binary artifact container shared by checkpoints, sensitivity maps, masks and perturbation records.

Layout::

    b"TSN1" | u64 manifest length | sha256(manifest) (32 bytes) | manifest (UTF-8 JSON) | payload

The manifest is canonical JSON (sorted keys, no whitespace). Every tensor is
a little-endian row-major block inside the payload, and the manifest carries
the payload's sha256, so any flipped bit is caught on read.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .masking import SparsityMask
from .model import Checkpoint, ModelConfig
from .perturbation import PerturbationRecord
from .sensitivity import SensitivityMap

MAGIC = b"TSN1"
KINDS = ("checkpoint", "sensitivity", "mask", "record")
DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}
_HEADER = len(MAGIC) + 8 + 32


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def _dtype_tag(arr) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise ContainerError(f"unsupported tensor dtype {arr.dtype}; container holds f32 and u32 only")


@dataclass
class Container:
    kind: str
    tensors: dict  # name -> ndarray, in payload order
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    version: str = __version__

    def to_bytes(self) -> bytes:
        if self.kind not in KINDS:
            raise ContainerError(f"unknown artifact kind {self.kind!r}")
        index, blocks, offset = [], [], 0
        for name, arr in self.tensors.items():
            tag = _dtype_tag(np.asarray(arr))
            raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
            index.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
            blocks.append(raw)
            offset += len(raw)
        payload = b"".join(blocks)
        manifest = canonical_json(
            {
                "kind": self.kind,
                "config": self.config,
                "meta": self.meta,
                "fingerprints": self.fingerprints,
                "tensors": index,
                "payload_sha256": hashlib.sha256(payload).hexdigest(),
                "payload_length": len(payload),
                "tool_version": self.version,
            }
        )
        return MAGIC + struct.pack("<Q", len(manifest)) + hashlib.sha256(manifest).digest() + manifest + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Container":
        if len(data) < _HEADER or data[:4] != MAGIC:
            raise ContainerError("not a TSN1 container (bad magic)")
        (mlen,) = struct.unpack("<Q", data[4:12])
        digest = data[12:44]
        if _HEADER + mlen > len(data):
            raise ContainerError("manifest length exceeds file size")
        mbytes = data[_HEADER : _HEADER + mlen]
        if hashlib.sha256(mbytes).digest() != digest:
            raise ContainerError("manifest checksum mismatch")
        try:
            man = json.loads(mbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"manifest is not valid JSON: {e}") from None
        if canonical_json(man) != mbytes:
            raise ContainerError("manifest is not in canonical form")
        payload = data[_HEADER + mlen :]
        if len(payload) != man.get("payload_length"):
            raise ContainerError(f"payload is {len(payload)} bytes, manifest says {man.get('payload_length')}")
        if hashlib.sha256(payload).hexdigest() != man.get("payload_sha256"):
            raise ContainerError("payload checksum mismatch")
        if man.get("kind") not in KINDS:
            raise ContainerError(f"unknown artifact kind {man.get('kind')!r}")
        tensors, expected = {}, 0
        for ent in man["tensors"]:
            tag, shape, off, length = ent["dtype"], tuple(ent["shape"]), ent["offset"], ent["length"]
            if tag not in DTYPES:
                raise ContainerError(f"{ent['name']}: unsupported dtype {tag!r}")
            if off != expected:
                raise ContainerError(f"{ent['name']}: offset {off} overlaps or leaves a gap (expected {expected})")
            if length != int(np.prod(shape, dtype=np.int64)) * 4:
                raise ContainerError(f"{ent['name']}: length {length} does not match shape {list(shape)}")
            if off + length > len(payload):
                raise ContainerError(f"{ent['name']}: block runs past the payload")
            arr = np.frombuffer(payload, dtype=DTYPES[tag], count=length // 4, offset=off).reshape(shape)
            tensors[ent["name"]] = arr.astype(DTYPES[tag].newbyteorder("="))
            expected = off + length
        if expected != len(payload):
            raise ContainerError("trailing bytes after the last tensor")
        return cls(man["kind"], tensors, man["config"], man["meta"], man["fingerprints"], man["tool_version"])


def write_container(path, container: Container, overwrite: bool = False) -> str:
    """Write atomically; refuses to replace an existing file unless ``overwrite``."""
    data = container.to_bytes()
    if os.path.exists(path) and not overwrite:
        raise FileExistsError(f"{path} already exists")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_container(path, kind=None) -> Container:
    with open(path, "rb") as f:
        c = Container.from_bytes(f.read())
    if kind is not None and c.kind != kind:
        raise ContainerError(f"{path}: expected a {kind} artifact, found {c.kind}")
    return c


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# artifact kinds


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


def checkpoint_container(ckpt: Checkpoint) -> Container:
    if ckpt.config.dtype != "float32":
        raise ContainerError("only float32 checkpoints can be stored; cast with astype('float32') first")
    tensors = {k: ckpt.params[k] for k in sorted(ckpt.params)}
    return Container("checkpoint", tensors, ckpt.config.to_dict(), _jsonable(ckpt.meta), {"checkpoint": ckpt.fingerprint()})


def checkpoint_from_container(c: Container) -> Checkpoint:
    cfg = ModelConfig.from_dict(c.config)
    ck = Checkpoint(cfg, dict(c.tensors), dict(c.meta))
    if c.fingerprints.get("checkpoint") and ck.fingerprint() != c.fingerprints["checkpoint"]:
        raise ContainerError("checkpoint fingerprint mismatch")
    return ck


def save_checkpoint(path, ckpt: Checkpoint, overwrite=False) -> str:
    return write_container(path, checkpoint_container(ckpt), overwrite)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_container(read_container(path, "checkpoint"))


def sensitivity_container(sens: SensitivityMap) -> Container:
    tensors = {k: sens.values[k].astype(np.float32) for k in sorted(sens.values)}
    return Container("sensitivity", tensors, {}, sens.meta(), {"checkpoint": sens.checkpoint_fingerprint, "dataset": sens.dataset_fingerprint})


def sensitivity_from_container(c: Container) -> SensitivityMap:
    m = c.meta
    values = {k: v.astype(np.float64) for k, v in c.tensors.items()}
    return SensitivityMap(values, m["n_samples"], m["loss_mode"], m["dataset_fingerprint"], m["checkpoint_fingerprint"])


def save_sensitivity(path, sens: SensitivityMap, overwrite=False) -> str:
    return write_container(path, sensitivity_container(sens), overwrite)


def load_sensitivity(path) -> SensitivityMap:
    return sensitivity_from_container(read_container(path, "sensitivity"))


def mask_container(mask: SparsityMask) -> Container:
    tensors = {}
    shapes = {}
    for name in sorted(mask.masks):
        m = mask.masks[name]
        if m.size > np.iinfo(np.uint32).max:
            raise ContainerError(f"{name}: too large for u32 indices")
        tensors[name] = np.flatnonzero(m).astype(np.uint32)
        shapes[name] = list(m.shape)
    meta = {
        "kappa": mask.kappa,
        "provenance": mask.provenance,
        "budgets": dict(mask.budgets),
        "shapes": shapes,
        "sources": _jsonable(mask.sources),
        "popcounts": mask.popcounts(),
    }
    return Container("mask", tensors, {}, meta, {"mask": mask.fingerprint()})


def mask_from_container(c: Container) -> SparsityMask:
    masks = {}
    for name, idx in c.tensors.items():
        shape = tuple(c.meta["shapes"][name])
        m = np.zeros(int(np.prod(shape)), dtype=bool)
        if idx.size and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx[-1]) >= m.size):
            raise ContainerError(f"{name}: mask indices must be sorted, unique and in range")
        m[idx.astype(np.int64)] = True
        masks[name] = m.reshape(shape)
    mask = SparsityMask(masks, c.meta["kappa"], dict(c.meta["budgets"]), c.meta["provenance"], dict(c.meta["sources"]))
    if mask.fingerprint() != c.fingerprints.get("mask"):
        raise ContainerError("mask fingerprint mismatch")
    return mask


def save_mask(path, mask: SparsityMask, overwrite=False) -> str:
    return write_container(path, mask_container(mask), overwrite)


def load_mask(path) -> SparsityMask:
    return mask_from_container(read_container(path, "mask"))


def record_container(rec: PerturbationRecord) -> Container:
    tensors = {}
    for name in sorted(rec.indices):
        tensors[f"{name}/indices"] = rec.indices[name].astype(np.uint32)
        tensors[f"{name}/old"] = np.asarray(rec.old_values[name], dtype=np.float32)
    meta = rec.meta()
    return Container("record", tensors, {}, meta, {"source": rec.source_fingerprint, "perturbed": rec.perturbed_fingerprint})


def record_from_container(c: Container) -> PerturbationRecord:
    names = sorted({k.rsplit("/", 1)[0] for k in c.tensors})
    m = c.meta
    return PerturbationRecord(
        {n: c.tensors[f"{n}/indices"].astype(np.int64) for n in names},
        {n: c.tensors[f"{n}/old"] for n in names},
        dict(m["replacement"]),
        m["mask_fingerprint"],
        m["source_fingerprint"],
        m["perturbed_fingerprint"],
        m["mode"],
        dict(m["counts"]),
    )


def save_record(path, rec: PerturbationRecord, overwrite=False) -> str:
    return write_container(path, record_container(rec), overwrite)


def load_record(path) -> PerturbationRecord:
    return record_from_container(read_container(path, "record"))
