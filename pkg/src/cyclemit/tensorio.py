"""Binary tensor and checkpoint persistence.

Tensor format (CXT1): magic ``CXT1``, u32 LE ndim, ndim x u64 LE dims,
then row-major interleaved LE float32 (re, im) pairs.  Checkpoints are a
JSON header followed by name-length-prefixed named CXT1 payloads.  All
writes are atomic (temp file + rename).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CXT1"
CKPT_MAGIC = b"CKP1"
MAX_ELEMENTS = 1 << 32  # refuse absurd allocations from corrupt headers


class TensorIOError(IOError):
    code = "io"


class BadMagicError(TensorIOError):
    code = "bad_magic"


class TruncatedPayloadError(TensorIOError):
    code = "truncated"


class DimOverflowError(TensorIOError):
    code = "dim_overflow"


class CheckpointShapeError(TensorIOError):
    code = "shape_mismatch"


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    tmp.replace(path)


def tensor_bytes(t) -> bytes:
    """Serialize a complex array (or ComplexTensor) to CXT1 bytes."""
    data = np.asarray(getattr(t, "data", t), dtype=np.complex128)
    if not np.all(np.isfinite(data)):
        raise TensorIOError("refusing to write non-finite tensor")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        buf.write(struct.pack("<Q", d))
    inter = np.empty(data.size * 2, dtype="<f4")
    flat = data.reshape(-1)
    inter[0::2] = flat.real.astype("<f4")
    inter[1::2] = flat.imag.astype("<f4")
    buf.write(inter.tobytes())
    return buf.getvalue()


def tensor_io_write(path, t) -> None:
    _atomic_write(Path(path), tensor_bytes(t))


def tensor_from_bytes(raw: bytes, offset: int = 0):
    """Parse one CXT1 record; returns (complex128 array, next_offset)."""
    if len(raw) - offset < 8:
        raise TruncatedPayloadError("header truncated")
    if raw[offset : offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[offset:offset+4]!r}")
    (ndim,) = struct.unpack_from("<I", raw, offset + 4)
    pos = offset + 8
    if len(raw) - pos < 8 * ndim:
        raise TruncatedPayloadError("dimension list truncated")
    dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
    pos += 8 * ndim
    n = 1
    for d in dims:
        n *= int(d)
        if n > MAX_ELEMENTS:
            raise DimOverflowError(f"element count {n} exceeds limit")
    need = 8 * n
    if len(raw) - pos < need:
        raise TruncatedPayloadError(
            f"payload truncated: need {need} bytes, have {len(raw) - pos}"
        )
    inter = np.frombuffer(raw, dtype="<f4", count=2 * n, offset=pos)
    data = (inter[0::2].astype(np.float64) + 1j * inter[1::2].astype(np.float64))
    return data.reshape(dims), pos + need


def tensor_io_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    data, end = tensor_from_bytes(raw)
    if end != len(raw):
        raise TruncatedPayloadError("trailing bytes after payload")
    return data


def expected_file_size(shape) -> int:
    n = int(np.prod(shape)) if len(shape) else 1
    return 4 + 4 + 8 * len(shape) + 8 * n


# -- checkpoints ------------------------------------------------------------


def checkpoint_save(path, params, unroll_config, extra: dict | None = None) -> None:
    """Named-tensor container with a JSON header (architecture, mu, seed)."""
    from .recon import ProxNetParams

    header = dict(
        format="cyclemit-checkpoint-v1",
        n_unrolls=unroll_config.n_unrolls,
        cg_iters=unroll_config.cg_iters,
        channels=unroll_config.channels,
        n_blocks=unroll_config.n_blocks,
        kernel_size=unroll_config.kernel_size,
        mu=repr(params.mu_value()),
    )
    header.update(extra or {})
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    arrays = params.arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name in ProxNetParams.FIELDS:
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(tensor_bytes(arrays[name]))
    _atomic_write(Path(path), buf.getvalue())


def checkpoint_load(path, unroll_config):
    """Load parameters, validating every tensor shape against the config."""
    from .recon import ProxNetParams, UnrollConfig

    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {raw[:4]!r}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    header = json.loads(raw[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        arr, pos = tensor_from_bytes(raw, pos)
        tensors[name] = arr

    k, ch = unroll_config.kernel_size, unroll_config.channels
    expected = dict(
        w_in=(ch, 2, k, k), b_in=(ch, 1, 1),
        w1=(ch, ch, k, k), b1=(ch, 1, 1),
        w2=(ch, ch, k, k), b2=(ch, 1, 1),
        w_out=(2, ch, k, k), b_out=(2, 1, 1),
        mu_raw=(1,),
    )
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
    params = ProxNetParams(**{n: tensors[n] for n in ProxNetParams.FIELDS})
    return params, header
