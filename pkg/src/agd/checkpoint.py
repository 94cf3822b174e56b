"""Sectioned binary checkpoints.

A checkpoint is a sequence of named sections, each carrying a JSON header
(shapes, rebuild config, hashes) and a flat float64 payload, followed by a
whole-file checksum.  A base model lives in one section; adapters append a
second section to the same file or ship alone as a ``.agda`` file keyed to
the base's parameter hash, so one base checkpoint composes with any number
of adapter sets trained on it.
"""

import json
import struct

import numpy as np

from agd import hashing
from agd.adapters import AdapterConfig, GuidedModel
from agd.diffusion import BaseTrainConfig, Denoiser
from agd.distill import FinetunedModel
from agd.errors import CompatibilityError

MAGIC = b"AGDC"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def _pack_params(params):
    shapes = [list(p.value.shape) for p in params]
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params)
    return shapes, payload


def _restore_params(params, shapes, payload):
    want = [tuple(s) for s in shapes]
    have = [p.value.shape for p in params]
    if want != have:
        raise CompatibilityError("checkpoint parameter shapes do not match the model")
    flat = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for p in params:
        n = p.value.size
        p.value[...] = flat[offset : offset + n].reshape(p.value.shape)
        offset += n
    if offset * 8 != len(payload):
        raise CompatibilityError("checkpoint payload size does not match the model")


def write_sections(path, sections):
    """sections: list of (name, meta dict, payload bytes)."""
    blob = bytearray(_HEAD.pack(MAGIC, VERSION, len(sections)))
    for name, meta, payload in sections:
        name_b = name.encode()
        meta_b = json.dumps(meta, sort_keys=True).encode()
        blob += struct.pack("<H", len(name_b)) + name_b
        blob += struct.pack("<I", len(meta_b)) + meta_b
        blob += struct.pack("<Q", len(payload)) + payload
    blob += struct.pack("<Q", hashing.fnv1a64(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


def read_sections(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size + 8:
        raise CompatibilityError(f"{path}: truncated checkpoint")
    body, (checksum,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if hashing.fnv1a64(body) != checksum:
        raise CompatibilityError(f"{path}: checksum mismatch, file is corrupt")
    magic, version, count = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise CompatibilityError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CompatibilityError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    offset = _HEAD.size
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset : offset + nlen].decode()
            offset += nlen
            (mlen,) = struct.unpack_from("<I", body, offset)
            offset += 4
            meta = json.loads(body[offset : offset + mlen])
            offset += mlen
            (plen,) = struct.unpack_from("<Q", body, offset)
            offset += 8
            payload = body[offset : offset + plen]
            if len(payload) != plen:
                raise CompatibilityError(f"{path}: truncated section {name!r}")
            offset += plen
            sections[name] = (meta, payload)
    except struct.error:
        raise CompatibilityError(f"{path}: malformed section table")
    return sections


def _base_section(model, config_hash=None, stage_hash=None):
    shapes, payload = _pack_params(model.params())
    meta = {
        "kind": "base",
        "num_classes": model.num_classes,
        "seed": model.seed,
        "train_cfg": vars(model.cfg) | {"hidden": list(model.cfg.hidden)},
        "shapes": shapes,
        "params_hash": model.params_hash(),
        "config_hash": config_hash,
        "stage_hash": stage_hash,
    }
    return "base", meta, payload


def _base_from_section(meta, payload):
    cfg_d = dict(meta["train_cfg"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    model = Denoiser(meta["num_classes"], BaseTrainConfig(**cfg_d), meta["seed"])
    _restore_params(model.params(), meta["shapes"], payload)
    if model.params_hash() != meta["params_hash"]:
        raise CompatibilityError("base parameters do not match their stored hash")
    return model


def _adapter_section(student, config_hash=None, stage_hash=None):
    shapes, payload = _pack_params(student.params())
    meta = {
        "kind": "adapters",
        "adapter_cfg": vars(student.cfg),
        "seed": student.seed,
        "shapes": shapes,
        "params_hash": student.params_hash(),
        "base_hash": student.base.params_hash(),
        "config_hash": config_hash,
        "stage_hash": stage_hash,
    }
    return "adapters", meta, payload


def save_base(path, model, config_hash=None, stage_hash=None):
    return write_sections(path, [_base_section(model, config_hash, stage_hash)])


def load_base(path):
    sections = read_sections(path)
    if "base" not in sections:
        raise CompatibilityError(f"{path}: no base section")
    return _base_from_section(*sections["base"])


def save_adapters(path, student, config_hash=None, stage_hash=None):
    """Standalone adapter file, composable with any copy of the same base."""
    return write_sections(path, [_adapter_section(student, config_hash, stage_hash)])


def load_adapters(path, base):
    sections = read_sections(path)
    if "adapters" not in sections:
        raise CompatibilityError(f"{path}: no adapter section")
    meta, payload = sections["adapters"]
    if base.params_hash() != meta["base_hash"]:
        raise CompatibilityError(
            "adapter file was trained against a different base model"
        )
    student = GuidedModel(base, AdapterConfig(**meta["adapter_cfg"]), meta["seed"])
    _restore_params(student.params(), meta["shapes"], payload)
    if student.params_hash() != meta["params_hash"]:
        raise CompatibilityError("adapter parameters do not match their stored hash")
    return student


def save_bundle(path, student, config_hash=None, stage_hash=None):
    """Base checkpoint with the adapter section appended."""
    return write_sections(
        path,
        [
            _base_section(student.base, config_hash, stage_hash),
            _adapter_section(student, config_hash, stage_hash),
        ],
    )


def load_bundle(path):
    sections = read_sections(path)
    if "base" not in sections or "adapters" not in sections:
        raise CompatibilityError(f"{path}: bundle needs base and adapter sections")
    base = _base_from_section(*sections["base"]).freeze()
    meta, payload = sections["adapters"]
    student = GuidedModel(base, AdapterConfig(**meta["adapter_cfg"]), meta["seed"])
    _restore_params(student.params(), meta["shapes"], payload)
    return base, student


def save_finetuned(path, model, config_hash=None, stage_hash=None):
    net_shapes, net_payload = _pack_params(model.net.params())
    path_shapes, path_payload = _pack_params(model.omega_mlp.params())
    net_meta = {
        "kind": "finetuned_net",
        "num_classes": model.net.num_classes,
        "seed": model.net.seed,
        "train_cfg": vars(model.net.cfg) | {"hidden": list(model.net.cfg.hidden)},
        "shapes": net_shapes,
        "params_hash": hashing.params_hash(model.net.params()),
        "config_hash": config_hash,
        "stage_hash": stage_hash,
    }
    omega_meta = {
        "kind": "omega_path",
        "shapes": path_shapes,
        "omega_freqs": model.omega_fourier.num_frequencies,
        "omega_scale": model.omega_fourier.scale,
        "pathway_seed": model.pathway_seed,
        "config_hash": config_hash,
    }
    return write_sections(
        path,
        [("base", net_meta, net_payload), ("omega_path", omega_meta, path_payload)],
    )


def load_finetuned(path):
    sections = read_sections(path)
    if "base" not in sections or "omega_path" not in sections:
        raise CompatibilityError(f"{path}: finetuned checkpoint needs two sections")
    net_meta, net_payload = sections["base"]
    cfg_d = dict(net_meta["train_cfg"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    donor = Denoiser(net_meta["num_classes"], BaseTrainConfig(**cfg_d), net_meta["seed"])
    omega_meta, omega_payload = sections["omega_path"]
    model = FinetunedModel(
        donor.freeze(),
        seed=omega_meta["pathway_seed"],
        omega_freqs=omega_meta["omega_freqs"],
        omega_scale=omega_meta["omega_scale"],
    )
    _restore_params(model.net.params(), net_meta["shapes"], net_payload)
    _restore_params(model.omega_mlp.params(), omega_meta["shapes"], omega_payload)
    if hashing.params_hash(model.net.params()) != net_meta["params_hash"]:
        raise CompatibilityError("finetuned parameters do not match their stored hash")
    return model


def stored_config_hash(path):
    """The config hash embedded in a checkpoint (None for older artifacts)."""
    sections = read_sections(path)
    for meta, _ in sections.values():
        if meta.get("config_hash") is not None:
            return meta["config_hash"]
    return None


def stored_stage_hash(path):
    """The stage-scoped hash embedded in a checkpoint, if any."""
    sections = read_sections(path)
    for meta, _ in sections.values():
        if meta.get("stage_hash") is not None:
            return meta["stage_hash"]
    return None
