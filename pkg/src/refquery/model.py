"""The disaggregation network and its serialized bundle.

Encoder: five same-padded conv layers (kernel 3, first conv stride 2), each
followed by ReLU and a ceil-mode max-pool, then a linear projection of the
flattened features to an E-dimensional, L2-normalized embedding.

Head: the reference and query embeddings are fused as
[e_r, e_q, (e_q - e_r)^2, e_q * e_r], passed through two ReLU layers of
width H, then split into a sigmoid state branch and a ReLU magnitude
branch. The z-space power output is gated: y_z = dz * state + b_off, where
b_off = -mean/std of the power normalizer represents exactly 0 W and is
never trained.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ndnet
from .errors import (
    BundleChecksumError,
    BundleFormatError,
    BundleTruncatedError,
    BundleVersionError,
    InvalidShapeError,
)
from .ndnet import ParamSet, Tensor
from .windowing import ZNormalizer

MAGIC = b"RQBUNDLE"
FORMAT_VERSION = 1

DEFAULT_CHANNELS = (32, 32, 64, 64, 128)


@dataclass(frozen=True)
class NetConfig:
    window: int = 599
    channels: tuple = DEFAULT_CHANNELS
    embed_dim: int = 128
    hidden: int = 128

    def __post_init__(self):
        if self.window % 2 == 0:
            raise InvalidShapeError(f"window length must be odd, got {self.window}")
        if len(self.channels) != 5:
            raise InvalidShapeError("encoder takes exactly five conv layers")


def encoder_length_schedule(window: int) -> list[int]:
    """Sequence lengths after each conv/pool stage, starting at the input.

    Conv 1 has stride 2; every conv keeps length (same padding) and every
    pool halves it in ceil mode.
    """
    lengths = [window]
    n = -(-window // 2)  # first conv, stride 2
    lengths.append(n)
    for i in range(5):
        n = -(-n // 2)   # pool
        lengths.append(n)
        if i < 4:
            lengths.append(n)  # stride-1 conv keeps length
    return lengths


def _init_weight(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Encoder:
    """Window -> unit-norm embedding."""

    def __init__(self, cfg: NetConfig, params: ParamSet | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        c = cfg.channels
        self.flat_len = encoder_length_schedule(cfg.window)[-1] * c[4]
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        ps = ParamSet()
        in_ch = 1
        for i, out_ch in enumerate(c, start=1):
            ps.add(f"enc.conv{i}.w", _init_weight(rng, (3, in_ch, out_ch),
                                                  3 * in_ch, dtype))
            ps.add(f"enc.conv{i}.b", Tensor(np.zeros(out_ch, dtype=dtype)))
            in_ch = out_ch
        ps.add("enc.proj.w", _init_weight(rng, (self.flat_len, cfg.embed_dim),
                                          self.flat_len, dtype))
        ps.add("enc.proj.b", Tensor(np.zeros(cfg.embed_dim, dtype=dtype)))
        self.params = ps

    def forward(self, window: Tensor) -> Tensor:
        """Encode (L,), (B, L), or (B, L, 1) z-normalized windows."""
        d = window.data
        squeeze = d.ndim == 1
        if d.ndim == 1:
            x = ndnet.reshape(window, (1, d.shape[0], 1))
        elif d.ndim == 2:
            x = ndnet.reshape(window, (d.shape[0], d.shape[1], 1))
        elif d.ndim == 3 and d.shape[2] == 1:
            x = window
        else:
            raise InvalidShapeError(f"cannot encode input of shape {d.shape}")
        if x.shape[1] != self.cfg.window:
            raise InvalidShapeError(
                f"window length {x.shape[1]} != expected {self.cfg.window}")
        p = self.params
        for i in range(1, 6):
            stride = 2 if i == 1 else 1
            x = ndnet.conv1d(x, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=stride)
            x = ndnet.relu(x)
            x = ndnet.maxpool1d(x)
        x = ndnet.reshape(x, (x.shape[0], self.flat_len))
        x = ndnet.dense(x, p["enc.proj.w"], p["enc.proj.b"])
        x = ndnet.l2_normalize(x)
        if squeeze:
            x = ndnet.reshape(x, (self.cfg.embed_dim,))
        return x


class Head:
    """(reference embedding, query embedding) -> (state probability, z-power)."""

    def __init__(self, cfg: NetConfig, b_off: float,
                 params: ParamSet | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.b_off = float(b_off)  # frozen OFF anchor, never in the ParamSet
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        e, h = cfg.embed_dim, cfg.hidden
        ps = ParamSet()
        ps.add("head.fc1.w", _init_weight(rng, (4 * e, h), 4 * e, dtype))
        ps.add("head.fc1.b", Tensor(np.zeros(h, dtype=dtype)))
        ps.add("head.fc2.w", _init_weight(rng, (h, h), h, dtype))
        ps.add("head.fc2.b", Tensor(np.zeros(h, dtype=dtype)))
        ps.add("head.cls.w", _init_weight(rng, (h, 1), h, dtype))
        ps.add("head.cls.b", Tensor(np.zeros(1, dtype=dtype)))
        ps.add("head.reg.w", _init_weight(rng, (h, 1), h, dtype))
        ps.add("head.reg.b", Tensor(np.zeros(1, dtype=dtype)))
        self.params = ps

    def forward(self, e_r: Tensor, e_q: Tensor):
        feats = interaction_features(e_r, e_q)
        p = self.params
        h = ndnet.relu(ndnet.dense(feats, p["head.fc1.w"], p["head.fc1.b"]))
        h = ndnet.relu(ndnet.dense(h, p["head.fc2.w"], p["head.fc2.b"]))
        state = ndnet.sigmoid(ndnet.dense(h, p["head.cls.w"], p["head.cls.b"]))
        dz = ndnet.relu(ndnet.dense(h, p["head.reg.w"], p["head.reg.b"]))
        batched = state.ndim == 2
        if batched:
            state = ndnet.reshape(state, (state.shape[0],))
            dz = ndnet.reshape(dz, (dz.shape[0],))
        else:
            state = ndnet.reshape(state, ())
            dz = ndnet.reshape(dz, ())
        y_z = ndnet.add(ndnet.mul(dz, state), state.dtype.type(self.b_off))
        return state, y_z


def interaction_features(e_r: Tensor, e_q: Tensor) -> Tensor:
    """Fuse embeddings as [e_r, e_q, (e_q - e_r)^2, e_q * e_r].

    Either embedding may be a single vector while the other is a batch;
    the vector is broadcast across the batch.
    """
    if e_r.shape[-1] != e_q.shape[-1]:
        raise InvalidShapeError(
            f"embedding lengths differ: {e_r.shape[-1]} vs {e_q.shape[-1]}")
    if e_r.ndim != e_q.ndim:
        if e_r.ndim == 1:
            e_r = ndnet.broadcast_to(e_r, e_q.shape)
        elif e_q.ndim == 1:
            e_q = ndnet.broadcast_to(e_q, e_r.shape)
    diff2 = ndnet.square(ndnet.sub(e_q, e_r))
    prod = ndnet.mul(e_q, e_r)
    return ndnet.concat([e_r, e_q, diff2, prod], axis=-1)


def encode(encoder: Encoder, window) -> Tensor:
    if not isinstance(window, Tensor):
        window = Tensor(window)
    return encoder.forward(window)


def head_forward(head: Head, e_r, e_q):
    if not isinstance(e_r, Tensor):
        e_r = Tensor(e_r)
    if not isinstance(e_q, Tensor):
        e_q = Tensor(e_q)
    return head.forward(e_r, e_q)


def off_bias(power_norm: ZNormalizer) -> float:
    """z-space value that denormalizes to exactly 0 W (float32 rounding)."""
    return float(np.float32(-power_norm.mean / power_norm.std))


# ---------------------------------------------------------------------------
# Bundle

@dataclass
class ModelBundle:
    """Frozen network, fitted normalizers, and a per-appliance embedding store."""

    encoder: Encoder
    head: Head
    query_norm: ZNormalizer
    ref_norm: ZNormalizer
    power_norm: ZNormalizer
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def config(self) -> NetConfig:
        return self.encoder.cfg

    @staticmethod
    def create(cfg: NetConfig, query_norm, ref_norm, power_norm,
               seed: int = 0, dtype=np.float32) -> "ModelBundle":
        enc = Encoder(cfg, seed=seed, dtype=dtype)
        head = Head(cfg, off_bias(power_norm), seed=seed + 1, dtype=dtype)
        return ModelBundle(enc, head, query_norm, ref_norm, power_norm)

    def params(self) -> ParamSet:
        return ParamSet.merged(self.encoder.params, self.head.params)

    def set_trainable(self, flag: bool):
        self.encoder.params.set_all_trainable(flag)
        self.head.params.set_all_trainable(flag)

    def checksum(self) -> str:
        return self.params().checksum()

    def num_params(self) -> int:
        return self.params().num_values()

    def add_embedding(self, name: str, values: np.ndarray):
        values = np.asarray(values, dtype=np.float32).reshape(-1)
        if values.shape != (self.config.embed_dim,):
            raise InvalidShapeError(
                f"embedding for {name!r} must have length {self.config.embed_dim}")
        store = dict(self.embeddings)  # new store version; readers keep the old one
        store[name] = values.copy()
        self.embeddings = store

    def get_embedding(self, name: str) -> np.ndarray:
        return self.embeddings[name]

    # -- serialization ------------------------------------------------------

    def _write_params(self, buf):
        merged = self.params()
        names = merged.names()
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(merged[name].data, dtype="<f4")
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", data.ndim))
            buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
            buf.write(data.tobytes())

    def network_bytes(self) -> bytes:
        """Serialized network parameters only (for bit-identity checks)."""
        buf = io.BytesIO()
        self._write_params(buf)
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        cfg = self.config
        buf.write(struct.pack("<II", cfg.window, len(cfg.channels)))
        buf.write(struct.pack(f"<{len(cfg.channels)}I", *cfg.channels))
        buf.write(struct.pack("<II", cfg.embed_dim, cfg.hidden))
        for z in (self.query_norm, self.ref_norm, self.power_norm):
            buf.write(struct.pack("<dd", z.mean, z.std))
        self._write_params(buf)
        buf.write(struct.pack("<I", len(self.embeddings)))
        for name, values in self.embeddings.items():
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", len(values)))
            buf.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        payload = buf.getvalue()
        return payload + struct.pack("<I", zlib.crc32(payload))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def from_bytes(raw: bytes) -> "ModelBundle":
        if len(raw) < len(MAGIC) + 8:
            raise BundleTruncatedError(f"bundle is only {len(raw)} bytes")
        if raw[:len(MAGIC)] != MAGIC:
            raise BundleFormatError("bad magic string; not a model bundle")
        cur = _Cursor(raw, len(MAGIC))
        (version,) = cur.unpack("<I")
        if version != FORMAT_VERSION:
            raise BundleVersionError(
                f"unsupported bundle version {version} (expected {FORMAT_VERSION})")
        window, n_ch = cur.unpack("<II")
        channels = cur.unpack(f"<{n_ch}I")
        embed_dim, hidden = cur.unpack("<II")
        cfg = NetConfig(window=window, channels=tuple(channels),
                        embed_dim=embed_dim, hidden=hidden)
        norms = [ZNormalizer(*cur.unpack("<dd")) for _ in range(3)]

        ps = ParamSet()
        (n_params,) = cur.unpack("<I")
        for _ in range(n_params):
            name = cur.read_string()
            (ndim,) = cur.unpack("<B")
            shape = cur.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(cur.read(4 * count), dtype="<f4").reshape(shape)
            # loaded bundles are frozen; training re-creates parameters fresh
            ps.add(name, Tensor(data.copy()), trainable=False)

        store = {}
        (n_emb,) = cur.unpack("<I")
        for _ in range(n_emb):
            name = cur.read_string()
            (dim,) = cur.unpack("<I")
            store[name] = np.frombuffer(cur.read(4 * dim), dtype="<f4").copy()

        stored_crc = struct.unpack_from("<I", raw, cur.pos)[0] if \
            len(raw) >= cur.pos + 4 else None
        if stored_crc is None or len(raw) != cur.pos + 4:
            raise BundleTruncatedError("bundle ends before the CRC trailer")
        if zlib.crc32(raw[:cur.pos]) != stored_crc:
            raise BundleChecksumError("bundle CRC mismatch")

        enc_ps, head_ps = ParamSet(), ParamSet()
        for name, t in ps.items():
            (enc_ps if name.startswith("enc.") else head_ps).add(
                name, t, trainable=False)
        encoder = Encoder(cfg, params=enc_ps)
        head = Head(cfg, off_bias(norms[2]), params=head_ps)
        return ModelBundle(encoder, head, norms[0], norms[1], norms[2],
                           embeddings=store, version=version)

    @staticmethod
    def load(path) -> "ModelBundle":
        with open(path, "rb") as fh:
            return ModelBundle.from_bytes(fh.read())

    def export_embeddings_text(self, path):
        """Plain-text map ``appliance_name: <E floats>`` for inspection."""
        with open(path, "w", encoding="utf-8") as fh:
            for name, values in self.embeddings.items():
                floats = " ".join(f"{float(v)!r}" for v in values)
                fh.write(f"{name}: {floats}\n")


class _Cursor:
    __slots__ = ("raw", "pos")

    def __init__(self, raw, pos):
        self.raw = raw
        self.pos = pos

    def read(self, n) -> bytes:
        if self.pos + n > len(self.raw):
            raise BundleTruncatedError(
                f"bundle truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.read(size))

    def read_string(self) -> str:
        (n,) = self.unpack("<H")
        return self.read(n).decode()
