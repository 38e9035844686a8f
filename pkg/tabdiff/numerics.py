"""
Dense-tensor numeric core for the autoencoder and the diffusion transformer.

Tensors are torch tensors. Every primitive below checks operand shapes
explicitly (there is no implicit broadcasting except scalar_scale; use
expand), refuses to return non-finite values, and is recorded on the active
Tape whenever one of its inputs requires grad. backward() turns a scalar loss
into populated .grad buffers and adam_step() applies the bias-corrected Adam
update in place.

Randomness comes from numpy's Philox-4x64 counter-based bit generator and
normal variates use numpy's ziggurat transform (Generator.standard_normal).
Seeds are unsigned 64-bit integers; independent sub-streams are obtained with
derive_seed(seed, *keys), which hashes the key path through
numpy.random.SeedSequence.
"""
import functools
import io
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from tabdiff.errors import AutodiffError, CacheFormatError, NumericOverflowError, ShapeError

# -----------------------------------------------------------------------------
# Precision

_dtype = torch.float32

def default_dtype() -> torch.dtype:
    return _dtype

@contextmanager
def float64_mode():
    """Switch tensor creation and random draws to float64 (gradient checks only)."""
    global _dtype
    prev, _dtype = _dtype, torch.float64
    try:
        yield
    finally:
        _dtype = prev

def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=_dtype).clone()
    return t.requires_grad_(requires_grad)

def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return torch.zeros(tuple(shape), dtype=_dtype, requires_grad=requires_grad)

# -----------------------------------------------------------------------------
# Tape

@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor

class Tape:
    """
    Ordered record of the primitives executed while the tape is active.

    The saved intermediates themselves live in torch's autograd graph; the tape
    keeps the execution order and the set of leaves so backward() can hand
    zero gradients to leaves the loss does not reach. One training step is a
    single-writer critical section: do not share an active tape across threads.
    """
    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._grad_mode = None

    def __enter__(self):
        Tape._stack.append(self)
        self._grad_mode = torch.enable_grad()
        self._grad_mode.__enter__()
        return self

    def __exit__(self, *exc):
        self._grad_mode.__exit__(*exc)
        Tape._stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor):
        self.records.append(TapeRecord(op, inputs, output))

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def leaves(self) -> list[Tensor]:
        seen, out = set(), []
        for r in self.records:
            for t in r.inputs:
                if t.is_leaf and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

# -----------------------------------------------------------------------------
# Primitives

PRIMITIVES: dict[str, Callable] = {}

def _tensor_args(args) -> tuple[Tensor, ...]:
    out = []
    for a in args:
        if isinstance(a, Tensor):
            out.append(a)
        elif isinstance(a, (list, tuple)):
            out.extend(x for x in a if isinstance(x, Tensor))
    return tuple(out)

def check_finite(name: str, t: Tensor):
    if not bool(torch.isfinite(t).all()):
        raise NumericOverflowError(f"{name}: non-finite value in output of shape {tuple(t.shape)}")

def primitive(name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            out = fn(*args, **kwargs)
            check_finite(name, out)
            tape = Tape.current()
            if tape is not None and out.requires_grad:
                tape.record(name, _tensor_args(args), out)
            return out
        PRIMITIVES[name] = run
        return run
    return wrap

def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)

@primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or a.dim() != b.dim() or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return torch.matmul(a, b)

@primitive("conv2d")
def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, bias.shape, detail="bias")
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    return F.conv2d(x, w, bias, stride=stride, padding=padding)

@primitive("transposed_conv2d")
def transposed_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    # w is laid out (in_channels, out_channels, kh, kw)
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("transposed_conv2d", x.shape, w.shape)
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError("transposed_conv2d", w.shape, bias.shape, detail="bias")
    return F.conv_transpose2d(x, w, bias, stride=stride, padding=padding, output_padding=output_padding)

@primitive("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a + b

@primitive("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return a * b

@primitive("scalar_scale")
def scalar_scale(x: Tensor, c: float) -> Tensor:
    return x * float(c)

@primitive("gelu")
def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="tanh")

@primitive("silu")
def silu(x: Tensor) -> Tensor:
    return F.silu(x)

@primitive("layer_norm")
def layer_norm(x: Tensor, eps: float = 1e-5, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    d = x.shape[-1]
    for p in (weight, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", x.shape, p.shape, detail="affine parameter")
    return F.layer_norm(x, (d,), weight, bias, eps)

@primitive("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)

@primitive("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.numel() or any(s <= 0 for s in shape):
        raise ShapeError("reshape", x.shape, shape)
    return x.reshape(shape)

@primitive("transpose")
def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.dim())):
        raise ShapeError("transpose", x.shape, axes, detail="axes must permute all dimensions")
    return x.permute(axes)

@primitive("slice")
def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError("slice", x.shape, (start, stop), detail=f"axis {axis}")
    return x.narrow(axis, start, stop - start)

@primitive("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    first = tensors[0]
    ax = axis % first.dim()
    for t in tensors[1:]:
        if t.dim() != first.dim() or any(t.shape[i] != first.shape[i] for i in range(first.dim()) if i != ax):
            raise ShapeError("concat", first.shape, t.shape, detail=f"axis {axis}")
    return torch.cat(list(tensors), dim=ax)

@primitive("mean")
def reduce_mean(x: Tensor, axis: int | None = None, keepdim: bool = False) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis, keepdim=keepdim)

@primitive("sum")
def reduce_sum(x: Tensor, axis: int | None = None, keepdim: bool = False) -> Tensor:
    return x.sum() if axis is None else x.sum(dim=axis, keepdim=keepdim)

@primitive("mse_loss")
def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mse_loss", a, b)
    return F.mse_loss(a, b)

@primitive("expand")
def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if x.dim() != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError("expand", x.shape, shape)
    return x.expand(shape)

@primitive("exp")
def exp(x: Tensor) -> Tensor:
    return torch.exp(x)

@primitive("tanh")
def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)

@primitive("clamp")
def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    return torch.clamp(x, lo, hi)

# composites

def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_scale(b, -1.0))

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out]), flattening leading dims explicitly."""
    lead = tuple(x.shape[:-1])
    y = matmul(reshape(x, (int(np.prod(lead, dtype=np.int64)), x.shape[-1])), w)
    if b is not None:
        y = add(y, expand(reshape(b, (1, b.shape[0])), y.shape))
    return reshape(y, lead + (w.shape[1],))

# -----------------------------------------------------------------------------
# Reverse mode

def backward(loss: Tensor, params: Iterable[Tensor] = (), tape: Tape | None = None):
    """
    Populate .grad on every requires_grad leaf the tape saw (and on `params`).
    Gradients accumulate additively; leaves the loss does not reach receive zeros.
    """
    tape = tape or Tape.current()
    if loss.numel() != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if tape is None or not tape.records:
        raise AutodiffError("backward: no active tape or tape is empty")
    leaves = tape.leaves()
    seen = {id(t) for t in leaves}
    leaves += [p for p in params if p.requires_grad and id(p) not in seen]
    if not loss.requires_grad:
        grads = [None] * len(leaves)
    else:
        grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    for leaf, g in zip(leaves, grads):
        g = torch.zeros_like(leaf) if g is None else g.detach()
        check_finite("backward", g)
        leaf.grad = g.clone() if leaf.grad is None else leaf.grad + g

def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None

# -----------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list[Tensor]
    v: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params], **hyper)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"adam.m.{i}": m for i, m in enumerate(self.m)}
        out.update({f"adam.v.{i}": v for i, v in enumerate(self.v)})
        return out

    def hyper(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, step=self.step)

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], hyper: dict) -> "AdamState":
        n = sum(1 for k in tensors if k.startswith("adam.m."))
        return cls(m=[tensors[f"adam.m.{i}"] for i in range(n)], v=[tensors[f"adam.v.{i}"] for i in range(n)], **hyper)

@torch.no_grad()
def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState):
    if not len(params) == len(grads) == len(state.m) == len(state.v):
        raise ShapeError("adam_step", (len(params),), (len(grads),), (len(state.m),), detail="parameter counts")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not p.shape == g.shape == m.shape == v.shape:
            raise ShapeError("adam_step", p.shape, g.shape, m.shape)
    state.step += 1
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.lerp_(g, 1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
        check_finite("adam_step", p)

# -----------------------------------------------------------------------------
# Randomness

U64 = 2**64

def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < U64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed

def derive_seed(seed: int, *keys: int | str) -> int:
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(k.encode()) for k in keys)
    return int(np.random.SeedSequence(_check_seed(seed), spawn_key=spawn).generate_state(1, np.uint64)[0])

def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(_check_seed(seed)))

def random_normal(shape: Sequence[int], seed: int) -> Tensor:
    np_dtype = np.float64 if _dtype == torch.float64 else np.float32
    return torch.from_numpy(generator(seed).standard_normal(tuple(shape), dtype=np_dtype))

def random_integers(low: int, high: int, size: int, seed: int) -> np.ndarray:
    """Uniform integers in [low, high] inclusive."""
    return generator(seed).integers(low, high, size=size, endpoint=True)

# -----------------------------------------------------------------------------
# TDW1 parameter container: magic, manifest of (name, dtype code, shape), then
# little-endian payloads in manifest order.

TDW_MAGIC = b"TDW1"
_DTYPE_CODES = {torch.float32: (1, "<f4"), torch.float64: (2, "<f8"), torch.int64: (3, "<i8")}
_CODE_DTYPES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPE_CODES.items()}

def write_tensors(f: BinaryIO, tensors: dict[str, Tensor]):
    f.write(TDW_MAGIC)
    f.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        if t.dtype not in _DTYPE_CODES:
            raise CacheFormatError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)) + raw)
        f.write(struct.pack("<BB", _DTYPE_CODES[t.dtype][0], t.dim()))
        f.write(struct.pack(f"<{t.dim()}I", *t.shape))
    for t in tensors.values():
        f.write(t.detach().cpu().contiguous().numpy().astype(_DTYPE_CODES[t.dtype][1], copy=False).tobytes())

def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CacheFormatError(f"truncated parameter container while reading {what}")
    return buf

def read_tensors(f: BinaryIO) -> dict[str, Tensor]:
    if _read_exact(f, 4, "magic") != TDW_MAGIC:
        raise CacheFormatError("bad magic: not a TDW1 parameter container")
    (count,) = struct.unpack("<I", _read_exact(f, 4, "count"))
    manifest = []
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, n, "name").decode()
        code, ndim = struct.unpack("<BB", _read_exact(f, 2, "dtype"))
        if code not in _CODE_DTYPES:
            raise CacheFormatError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
        manifest.append((name, code, shape))
    out = {}
    for name, code, shape in manifest:
        dt, np_dt = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(_read_exact(f, n * np.dtype(np_dt).itemsize, name), dtype=np_dt)
        out[name] = torch.from_numpy(arr.astype(np.dtype(np_dt).newbyteorder("=")).reshape(shape)).to(dt)
    if f.read(1):
        raise CacheFormatError("trailing bytes after parameter payloads")
    return out

def save_tensors(path: str | Path, tensors: dict[str, Tensor]):
    with open(path, "wb") as f:
        write_tensors(f, tensors)

def load_tensors(path: str | Path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        return read_tensors(f)

def tensors_to_bytes(tensors: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()
