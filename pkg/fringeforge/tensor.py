"""
tensor.py - 4 軸テンソルの逆モード自動微分モジュール

[N, C, H, W] の 64bit 実数テンソルと計算テープ（Tape）を提供する。
位相復元ネットワークが必要とする演算子のみを実装：
- conv2d（3×3, ゼロパディング 1, stride 1|2）
- batch_norm（学習時はバッチ統計、推論時は移動平均）
- relu6, sigmoid, bilinear_resize（half-pixel 中心）, avg_pool_to
- weighted_sum, 要素演算, 総和・平均, 空間差分

【Design constraints】
- Recording happens only inside an active `with Tape():` block; outside a tape
  every operation is a plain forward evaluation.
- A tape is single-threaded. Active tapes are tracked per thread, so independent
  tapes may run in parallel threads.
- All data is float64.
"""

import logging
import math
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


logger = logging.getLogger(__name__)

_local = threading.local()

Number = Union[int, float]


def _tape_stack() -> List['Tape']:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional['Tape']:
    """現在のスレッドで有効なテープ（無ければ None）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    4 軸テンソル [N, C, H, W]

    テープ上で生成されたテンソルは tape / node を持つ。
    requires_grad=True の葉テンソルは backward() で grad に勾配が加算される。
    """

    __slots__ = ('data', 'requires_grad', 'grad', 'tape', 'node')

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor needs 4 axes [N,C,H,W], got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"Tensor axes must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape: Optional['Tape'] = None
        self.node: Optional[int] = None

    @classmethod
    def scalar(cls, value: Number, requires_grad: bool = False) -> 'Tensor':
        return cls(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> 'Tensor':
        """2 軸グリッド [H, W] を [1, 1, H, W] に包む"""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ShapeError(f"grid needs 2 axes [H,W], got shape {grid.shape}")
        return cls(grid[None, None])

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: Number):
        return scale(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tape is not None})"


class Parameter(Tensor):
    """学習可能パラメータ（名前付き、勾配は常に確保）"""

    __slots__ = ('name',)

    def __init__(self, data, name: str = ''):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ('kind', 'inputs', 'backward_fn')

    def __init__(self, kind: str, inputs: Tuple[Tensor, ...], backward_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """
    計算テープ

    ノードは記録順に並ぶ（入力は必ず先に記録される = トポロジカル順）。
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or (t.tape is self and t.node is not None)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], out: Tensor,
               backward_fn: Callable) -> Tensor:
        if not any(self._tracks(t) for t in inputs):
            return out
        out.tape = self
        out.node = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """
        逆伝播（逆トポロジカル順に掃引）

        Args:
            loss: スカラー [1,1,1,1] の損失テンソル
        """
        if loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward needs a scalar loss of shape (1, 1, 1, 1), got {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")

        grads: List[Optional[np.ndarray]] = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(loss.data)

        for index in range(loss.node, -1, -1):
            g = grads[index]
            if g is None:
                continue
            node = self.nodes[index]
            for inp, ig in zip(node.inputs, node.backward_fn(g)):
                if ig is None:
                    continue
                if inp.tape is self and inp.node is not None:
                    # 分岐（fan-out）は加算で合流
                    if grads[inp.node] is None:
                        grads[inp.node] = ig.copy()
                    else:
                        grads[inp.node] += ig
                elif inp.requires_grad:
                    inp.grad += ig


def backward(loss: Tensor) -> None:
    """loss を記録したテープで逆伝播する"""
    if loss.tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss.tape.backward(loss)


def _emit(kind: str, inputs: Tuple[Tensor, ...], data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.tape = None
    out.node = None
    tape = active_tape()
    if tape is not None:
        tape.record(kind, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor.scalar(float(x))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        bad = [axis for axis, (x, y) in zip('NCHW', zip(a.shape, b.shape))
               if x != y and 1 not in (x, y)]
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} disagree on axes {bad}")


# ---------------------------------------------------------------------------
# 要素演算
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape('add', a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _emit('add', (a, b), a.data + b.data, back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape('sub', a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _emit('sub', (a, b), a.data - b.data, back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape('mul', a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _emit('mul', (a, b), a.data * b.data, back)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def back(g):
        return (g * factor,)
    return _emit('scale', (a,), a.data * factor, back)


def square(a: Tensor) -> Tensor:
    def back(g):
        return (2.0 * a.data * g,)
    return _emit('square', (a,), a.data * a.data, back)


def log(a: Tensor) -> Tensor:
    def back(g):
        return (g / a.data,)
    return _emit('log', (a,), np.log(a.data), back)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """[lo, hi] への切り詰め（内側でのみ勾配を通す）"""
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)
    return _emit('clamp', (a,), np.clip(a.data, lo, hi), back)


def relu6(a: Tensor) -> Tensor:
    """min(max(x, 0), 6)。折れ点 0 と 6 での劣勾配は 0"""
    inside = (a.data > 0.0) & (a.data < 6.0)

    def back(g):
        return (g * inside,)
    return _emit('relu6', (a,), np.clip(a.data, 0.0, 6.0), back)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(theta):
    """
    1 / (1 + e^(−θ))

    Args:
        theta: 実数またはテンソル

    Returns:
        実数なら実数、テンソルならテンソル
    """
    if not isinstance(theta, Tensor):
        theta = float(theta)
        if theta >= 0:
            return 1.0 / (1.0 + math.exp(-theta))
        ex = math.exp(theta)
        return ex / (1.0 + ex)

    s = _sigmoid_array(theta.data)

    def back(g):
        return (g * s * (1.0 - s),)
    return _emit('sigmoid', (theta,), s, back)


def total(a: Tensor) -> Tensor:
    """全要素の総和 → スカラー"""
    def back(g):
        return (np.broadcast_to(g, a.shape).copy(),)
    return _emit('sum', (a,), np.full((1, 1, 1, 1), a.data.sum()), back)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _emit('mean', (a,), np.full((1, 1, 1, 1), a.data.sum() / n), back)


def spatial_diff(a: Tensor, axis: str) -> Tensor:
    """
    前進差分（axis='x' は W 方向、'y' は H 方向）

    出力は差分方向の長さが 1 短くなる。
    """
    ax = {'x': 3, 'y': 2}[axis]
    if a.shape[ax] < 2:
        raise ShapeError(f"spatial_diff along {axis} needs at least 2 samples, got shape {a.shape}")
    hi = [slice(None)] * 4
    lo = [slice(None)] * 4
    hi[ax] = slice(1, None)
    lo[ax] = slice(None, -1)
    hi, lo = tuple(hi), tuple(lo)

    def back(g):
        gi = np.zeros_like(a.data)
        gi[hi] += g
        gi[lo] -= g
        return (gi,)
    return _emit('diff_' + axis, (a,), a.data[hi] - a.data[lo], back)


def stack_scalars(items: Sequence) -> Tensor:
    """スカラーテンソル列を [1, 1, 1, K] に並べる"""
    ts = [_as_tensor(t) for t in items]
    if not ts:
        raise ShapeError("stack_scalars needs at least one scalar")
    for t in ts:
        if t.shape != (1, 1, 1, 1):
            raise ShapeError(f"stack_scalars expects scalars, got shape {t.shape}")
    data = np.concatenate([t.data for t in ts], axis=3)

    def back(g):
        return tuple(g[:, :, :, k:k + 1].copy() for k in range(len(ts)))
    return _emit('stack', tuple(ts), data, back)


def weighted_sum(inputs: Sequence[Tensor], weights: Sequence) -> Tensor:
    """
    Σ wᵢ·xᵢ（融合ノード）

    Args:
        inputs: 同一形状のテンソル列（1 個以上）
        weights: 実数またはスカラーテンソルの列（inputs と同じ長さ）

    Returns:
        加重和テンソル
    """
    if not inputs:
        raise ShapeError("weighted_sum needs at least one input")
    if len(inputs) != len(weights):
        raise ShapeError(f"weighted_sum got {len(inputs)} inputs but {len(weights)} weights")
    shape = inputs[0].shape
    for k, x in enumerate(inputs):
        if x.shape != shape:
            bad = [axis for axis, (p, q) in zip('NCHW', zip(shape, x.shape)) if p != q]
            raise ShapeError(f"weighted_sum input {k} has shape {x.shape}, expected {shape} (axes {bad})")
    ws = [_as_tensor(w) for w in weights]
    for w in ws:
        if w.shape != (1, 1, 1, 1):
            raise ShapeError(f"weighted_sum weights must be scalars, got shape {w.shape}")

    data = np.zeros(shape)
    for x, w in zip(inputs, ws):
        data += w.data[0, 0, 0, 0] * x.data

    def back(g):
        gx = [w.data[0, 0, 0, 0] * g for w in ws]
        gw = [np.full((1, 1, 1, 1), float(np.vdot(g, x.data))) for x in inputs]
        return tuple(gx) + tuple(gw)
    return _emit('weighted_sum', tuple(inputs) + tuple(ws), data, back)


# ---------------------------------------------------------------------------
# 畳み込み・正規化
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """
    3×3 畳み込み（ゼロパディング 1）

    Args:
        x: 入力 [N, C_in, H, W]
        kernel: [C_out, C_in, 3, 3]
        bias: [1, C_out, 1, 1]
        stride: 1 または 2

    Returns:
        [N, C_out, ⌈H/stride⌉, ⌈W/stride⌉]
    """
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    c_out, c_in, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel spatial axes must be 3x3, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input axis C={x.shape[1]} does not match kernel axis C_in={c_in}")
    if bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel axis C_out={c_out}")

    n, _, h, w = x.shape
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data

    def back(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        return gxp[:, :, 1:-1, 1:-1], gk, gb
    return _emit('conv2d', (x, kernel, bias), out, back)


class RunningStats:
    """バッチ正規化の移動平均統計"""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros((1, channels, 1, 1))
        self.var = np.ones((1, channels, 1, 1))
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5,
               training: bool = True, stats: Optional[RunningStats] = None) -> Tensor:
    """
    チャネル毎のバッチ正規化  γ·(x−μ)/√(σ²+ε) + β

    学習時は N,H,W 軸のバッチ統計で正規化し、stats があれば移動平均を更新する。
    推論時は stats の移動平均を使う。
    """
    c = x.shape[1]
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm: input axis C={c} does not match gamma {gamma.shape} / beta {beta.shape}")
    axes = (0, 2, 3)

    if not training:
        if stats is None:
            raise ValueError("batch_norm inference mode needs running statistics")
        invstd = 1.0 / np.sqrt(stats.var + epsilon)
        xhat = (x.data - stats.mean) * invstd

        def back_eval(g):
            return (g * gamma.data * invstd,
                    (g * xhat).sum(axis=axes, keepdims=True),
                    g.sum(axis=axes, keepdims=True))
        return _emit('batch_norm', (x, gamma, beta), gamma.data * xhat + beta.data, back_eval)

    n = x.data.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * invstd

    if stats is not None:
        m = stats.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        stats.mean = (1.0 - m) * stats.mean + m * mu
        stats.var = (1.0 - m) * stats.var + m * unbiased

    def back(g):
        dxhat = g * gamma.data
        gx = (invstd / n) * (n * dxhat
                             - dxhat.sum(axis=axes, keepdims=True)
                             - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return (gx,
                (g * xhat).sum(axis=axes, keepdims=True),
                g.sum(axis=axes, keepdims=True))
    return _emit('batch_norm', (x, gamma, beta), gamma.data * xhat + beta.data, back)


# ---------------------------------------------------------------------------
# 空間リサンプリング
# ---------------------------------------------------------------------------

def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    # half-pixel 中心: src = (dst + 0.5)·(src/dst) − 0.5、端でクランプ
    mat = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        pos = min(max((i + 0.5) * ratio - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(pos))
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """双線形補間（同一サイズなら厳密な恒等写像）"""
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"bilinear_resize target must be ≥ 1, got {target_h}x{target_w}")
    _, _, h, w = x.shape
    if (h, w) == (target_h, target_w):
        def back_identity(g):
            return (g,)
        return _emit('resize', (x,), x.data.copy(), back_identity)

    ry = _bilinear_matrix(h, target_h)
    rx = _bilinear_matrix(w, target_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def back(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)
    return _emit('resize', (x,), out, back)


def _pool_matrix(src: int, dst: int) -> np.ndarray:
    mat = np.zeros((dst, src))
    for i in range(dst):
        start = (i * src) // dst
        end = -((-(i + 1) * src) // dst)
        mat[i, start:end] = 1.0 / (end - start)
    return mat


def avg_pool_to(x: Tensor, out_h: int = 3, out_w: int = 3) -> Tensor:
    """適応平均プーリング（各出力セルは整数サブウィンドウの平均）"""
    _, _, h, w = x.shape
    if h < out_h or w < out_w:
        raise ShapeError(f"avg_pool_to {out_h}x{out_w} needs H,W ≥ target, got H={h} W={w}")
    py = _pool_matrix(h, out_h)
    px = _pool_matrix(w, out_w)
    out = np.matmul(np.matmul(py, x.data), px.T)

    def back(g):
        return (np.matmul(np.matmul(py.T, g), px),)
    return _emit('avg_pool', (x,), out, back)


# ---------------------------------------------------------------------------
# 勾配チェック
# ---------------------------------------------------------------------------

def grad_check(op_closure: Callable[[], Tensor], inputs: Sequence[Tensor],
               step: float = 1e-5, tolerance: float = 1e-4,
               max_elements: Optional[int] = None, seed: int = 0,
               floor: float = 0.0) -> float:
    """
    中心差分による勾配検証

    要素毎の相対誤差 |a − n| / max(|a|, |n|) の最大値を返す（a = n = 0 は誤差 0）。
    floor > 0 なら分母を floor·max|n| 以上に保つ。batch norm 直前の bias のように
    勾配が構造的に 0 で差分値が丸め誤差だけになる要素を含むネットワーク全体の検証用。

    Args:
        op_closure: inputs からスカラー損失を計算する関数（引数なし）
        inputs: 検証する葉テンソル（requires_grad=True）
        step: 差分ステップ（1e-6〜1e-4）
        tolerance: 超えた場合に警告ログを出す閾値
        max_elements: 入力毎に検査する要素数の上限（None なら全要素）
        seed: 要素サンプリングの乱数シード
        floor: 分母の下限（max|n| に対する比、0 なら素の相対誤差）

    Returns:
        最大相対誤差
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"grad_check step must lie in [1e-6, 1e-4], got {step}")
    if floor < 0:
        raise ValueError(f"grad_check floor must be ≥ 0, got {floor}")
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must be leaf tensors with requires_grad=True")
        t.zero_grad()

    with Tape() as tape:
        loss = op_closure()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    pairs = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for k in indices:
            orig = flat[k]
            flat[k] = orig + step
            f_plus = op_closure().item()
            flat[k] = orig - step
            f_minus = op_closure().item()
            flat[k] = orig
            pairs.append((a.reshape(-1)[k], (f_plus - f_minus) / (2.0 * step)))

    if not pairs:
        return 0.0
    an = np.array(pairs)
    denom = np.maximum(np.abs(an[:, 0]), np.abs(an[:, 1]))
    if floor > 0:
        denom = np.maximum(denom, floor * np.abs(an[:, 1]).max())
    diff = np.abs(an[:, 0] - an[:, 1])
    rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
    worst = float(rel.max())
    if worst > tolerance:
        logger.warning(f"grad_check: max relative error {worst:.3e} exceeds {tolerance:.1e}")
    return worst
