"""
fft.py - 反復型 radix-2 FFT モジュール

2 のべき乗長の 1 次元 FFT を任意の軸に沿ってベクトル化して適用し、
2 次元 FFT（fft2 / ifft2）を構成する。検証用に O(N²) の直接 DFT も持つ。

- fft2: 正規化なしの順変換
- ifft2: H·W で割る逆変換
"""

import logging
from typing import Dict

import numpy as np


logger = logging.getLogger(__name__)

_REVERSAL_CACHE: Dict[int, np.ndarray] = {}


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    rev = _REVERSAL_CACHE.get(n)
    if rev is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            rev |= ((idx >> b) & 1) << (bits - 1 - b)
        _REVERSAL_CACHE[n] = rev
    return rev


def fft(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """
    1 次元 radix-2 FFT（指定軸に沿って、他の軸はベクトル化）

    Args:
        x: 複素配列
        axis: 変換する軸
        inverse: True なら逆変換（1/n 倍を含む）

    Returns:
        変換後の複素配列
    """
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")

    # ビット反転置換
    x = x[..., _bit_reverse_indices(n)].copy()
    sign = 1.0 if inverse else -1.0
    lead = x.shape[:-1]

    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = x.reshape(lead + (n // m, m))
        u = blocks[..., :half].copy()
        t = blocks[..., half:] * twiddle
        blocks[..., :half] = u + t
        blocks[..., half:] = u - t
        x = blocks.reshape(lead + (n,))
        m <<= 1

    if inverse:
        x = x / n
    return np.moveaxis(x, -1, axis)


def _check_field(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=np.complex128)
    if field.ndim != 2:
        raise ValueError(f"fft2 needs a 2-axis field, got shape {field.shape}")
    h, w = field.shape
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"fft2 needs power-of-two dimensions, got {h}x{w}")
    return field


def fft2(field: np.ndarray) -> np.ndarray:
    """2 次元順変換（正規化なし）"""
    field = _check_field(field)
    return fft(fft(field, axis=1), axis=0)


def ifft2(field: np.ndarray) -> np.ndarray:
    """2 次元逆変換（H·W で割る）"""
    field = _check_field(field)
    return fft(fft(field, axis=1, inverse=True), axis=0, inverse=True)


def dft2(field: np.ndarray) -> np.ndarray:
    """直接 DFT（O(N²)、検証用の参照実装）"""
    field = np.asarray(field, dtype=np.complex128)
    h, w = field.shape
    ky = np.arange(h)
    kx = np.arange(w)
    fy = np.exp(-2j * np.pi * np.outer(ky, ky) / h)
    fx = np.exp(-2j * np.pi * np.outer(kx, kx) / w)
    return fy @ field @ fx.T


def signed_bins(n: int) -> np.ndarray:
    """周波数ビン番号（0, 1, …, n/2−1, −n/2, …, −1）"""
    k = np.arange(n)
    return np.where(k < (n + 1) // 2, k, k - n)
