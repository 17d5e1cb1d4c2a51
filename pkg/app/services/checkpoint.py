"""Versioned binary checkpoint files.

Layout: magic, format version (u32), descriptor length (u64), UTF-8 JSON
descriptor, concatenated little-endian float64 arrays, CRC-32 (u32) of every
preceding byte. Integers live in the descriptor; every float lives in the
array block so values round-trip bit-exactly.
"""

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from app.config import EngineConfig
from app.errors import ChecksumMismatch, IoError, VersionMismatch
from app.services import dpmm, vae
from app.services.engine import EngineCheckpoint, HealthyRegistry

logger = logging.getLogger(__name__)

MAGIC = b"DPVILCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


class _ArrayBlock:
    def __init__(self):
        self.entries: List[Dict] = []
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, name: str, value) -> None:
        data = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        raw = data.tobytes(order="C")
        self.entries.append({"name": name, "shape": list(data.shape), "offset": self.offset})
        self.chunks.append(raw)
        self.offset += len(raw)

    def payload(self) -> bytes:
        return b"".join(self.chunks)


def _dpmm_arrays(block: _ArrayBlock, state: dpmm.DpmmState) -> None:
    prior = state.prior
    for name, value in (
        ("prior.alpha", [prior.alpha]), ("prior.m", prior.m), ("prior.lam", [prior.lam]),
        ("prior.W", prior.W), ("prior.nu", [prior.nu]),
        ("nw.m", state.nw.m), ("nw.lam", state.nw.lam), ("nw.W", state.nw.W), ("nw.W_inv", state.nw.W_inv),
        ("nw.nu", state.nw.nu), ("nw.logdet_W", state.nw.logdet_W),
        ("sticks.a1", state.sticks.a1), ("sticks.a2", state.sticks.a2),
        ("stats.n", state.stats.n), ("stats.s1", state.stats.s1), ("stats.s2", state.stats.s2),
        ("stats.n_tail", [state.stats.n_tail]),
        ("memory.n", state.memory.n), ("memory.s1", state.memory.s1), ("memory.s2", state.memory.s2),
        ("elbo", [state.elbo]), ("tau", [state.tau]),
    ):
        block.add(f"dpmm.{name}", value)


def to_bytes(ckpt: EngineCheckpoint) -> bytes:
    block = _ArrayBlock()
    for name in ckpt.params.names():
        block.add(f"params.{name}", ckpt.params[name])
        block.add(f"adam.m.{name}", ckpt.adam.m[name])
        block.add(f"adam.v.{name}", ckpt.adam.v[name])
    for name in ("learning_rate", "beta1", "beta2", "eps"):
        block.add(f"adam.{name}", [getattr(ckpt.adam, name)])
    block.add("feature_mean", ckpt.feature_mean)
    block.add("feature_std", ckpt.feature_std)

    dpmm_meta = None
    if ckpt.dpmm is not None:
        _dpmm_arrays(block, ckpt.dpmm)
        dpmm_meta = {
            "ids": [int(i) for i in ckpt.dpmm.ids],
            "next_id": int(ckpt.dpmm.next_id),
            "order": [int(i) for i in ckpt.dpmm.sticks.order],
        }

    descriptor = {
        "format": "dpvil-checkpoint",
        "version": FORMAT_VERSION,
        "config": ckpt.config.model_dump(mode="json"),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng.bit_generator.state,
        "registry": sorted(int(i) for i in ckpt.registry.ids),
        "network": {
            "input_dim": ckpt.params.input_dim,
            "latent_dim": ckpt.params.latent_dim,
            "hidden_sizes": list(ckpt.params.hidden_sizes),
            "names": ckpt.params.names(),
        },
        "adam_step": ckpt.adam.step,
        "dpmm": dpmm_meta,
        "arrays": block.entries,
    }
    doc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(doc)) + doc + block.payload()
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _parse(raw: bytes) -> Tuple[Dict, Dict[str, np.ndarray]]:
    if len(raw) < _HEADER.size + _CRC.size:
        raise ChecksumMismatch("checkpoint is truncated")
    magic, version, doc_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise IoError("file is not a checkpoint")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    body, (stored,) = raw[:-_CRC.size], _CRC.unpack(raw[-_CRC.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch("checkpoint CRC does not match its contents")
    start = _HEADER.size
    try:
        descriptor = json.loads(body[start:start + doc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ChecksumMismatch(f"checkpoint descriptor is unreadable: {e}") from e
    payload = body[start + doc_len:]
    arrays = {}
    for entry in descriptor["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise ChecksumMismatch(f"array {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]) \
            .reshape(entry["shape"]).astype(np.float64)
    return descriptor, arrays


def _restore_dpmm(meta: Dict, arrays: Dict[str, np.ndarray]) -> dpmm.DpmmState:
    a = {name[len("dpmm."):]: value for name, value in arrays.items() if name.startswith("dpmm.")}
    prior = dpmm.DpPrior(
        alpha=float(a["prior.alpha"][0]), m=a["prior.m"], lam=float(a["prior.lam"][0]),
        W=a["prior.W"], nu=float(a["prior.nu"][0]),
    )
    nw = dpmm.NwPosterior(
        m=a["nw.m"], lam=a["nw.lam"], W=a["nw.W"], W_inv=a["nw.W_inv"], nu=a["nw.nu"], logdet_W=a["nw.logdet_W"],
    )
    sticks = dpmm.StickPosterior(a1=a["sticks.a1"], a2=a["sticks.a2"], order=np.array(meta["order"], dtype=np.int64))
    return dpmm.DpmmState(
        prior=prior,
        ids=np.array(meta["ids"], dtype=np.int64),
        nw=nw,
        sticks=sticks,
        stats=dpmm.SuffStats(a["stats.n"], a["stats.s1"], a["stats.s2"], float(a["stats.n_tail"][0])),
        memory=dpmm.SuffStats(a["memory.n"], a["memory.s1"], a["memory.s2"]),
        elbo=float(a["elbo"][0]),
        tau=float(a["tau"][0]),
        next_id=int(meta["next_id"]),
    )


def from_bytes(raw: bytes) -> EngineCheckpoint:
    descriptor, arrays = _parse(raw)
    net = descriptor["network"]
    names = net["names"]
    params = vae.MlpParams(
        {name: arrays[f"params.{name}"] for name in names},
        int(net["input_dim"]), int(net["latent_dim"]), tuple(net["hidden_sizes"]),
    )
    adam = vae.AdamState(
        m={name: arrays[f"adam.m.{name}"] for name in names},
        v={name: arrays[f"adam.v.{name}"] for name in names},
        step=int(descriptor["adam_step"]),
        learning_rate=float(arrays["adam.learning_rate"][0]),
        beta1=float(arrays["adam.beta1"][0]),
        beta2=float(arrays["adam.beta2"][0]),
        eps=float(arrays["adam.eps"][0]),
    )
    bit_generator = np.random.PCG64()
    bit_generator.state = descriptor["rng_state"]
    state = _restore_dpmm(descriptor["dpmm"], arrays) if descriptor["dpmm"] is not None else None
    return EngineCheckpoint(
        config=EngineConfig(**descriptor["config"]),
        params=params,
        adam=adam,
        dpmm=state,
        registry=HealthyRegistry(frozenset(descriptor["registry"])),
        feature_mean=arrays["feature_mean"],
        feature_std=arrays["feature_std"],
        rng=np.random.Generator(bit_generator),
        epoch=int(descriptor["epoch"]),
    )


def save(ckpt: EngineCheckpoint, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(ckpt))
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path} (epoch {ckpt.epoch}, K_a={ckpt.k_active})")
    return path


def load(path) -> EngineCheckpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(raw)
