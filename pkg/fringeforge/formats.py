"""
formats.py - ファイル形式モジュール

- QPT1：テンソルのバイナリ形式
    magic "QPT1" + u8 rank(=4) + u64×4 dims（little-endian）+ f64 本体（row-major）
- チェックポイント：YAML マニフェスト（name, shape, offset, length）+ "..." 行 + QPT1 フレーム列
- 16bit PGM（P5, maxval 65535）への書き出し
- 画像ファイル（PGM/PNG/TIFF など）からのグリッド読込（Pillow）

【Design constraints】
- Every writer is byte-deterministic: no timestamps, fixed key order.
- QPT1 round trips are bit-exact.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import yaml

try:
    from PIL import Image
    PIL_AVAILABLE = True
except ImportError:
    PIL_AVAILABLE = False
    logging.warning("Pillow not installed - only .qpt grids can be loaded")

from .errors import FormatError


logger = logging.getLogger(__name__)

QPT_MAGIC = b"QPT1"
QPT_SUFFIX = ".qpt"
CHECKPOINT_FORMAT = "fringeforge-checkpoint"
CHECKPOINT_VERSION = 1
_HEADER_END = b"\n...\n"
_HEAD = struct.Struct("<4sB4Q")


# ---------------------------------------------------------------------------
# QPT1
# ---------------------------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    """
    配列を QPT1 フレームに符号化

    Args:
        arr: 4 軸の実数配列（2 軸なら [1,1,H,W] として扱う）

    Returns:
        QPT1 バイト列
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4:
        raise FormatError(f"QPT1 stores rank-4 tensors, got rank {arr.ndim}")
    return _HEAD.pack(QPT_MAGIC, 4, *arr.shape) + arr.astype("<f8").tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    QPT1 フレームを復号

    Returns:
        (配列, 次フレームのオフセット)
    """
    if len(buf) - offset < _HEAD.size:
        raise FormatError("truncated QPT1 header")
    magic, rank, *dims = _HEAD.unpack_from(buf, offset)
    if magic != QPT_MAGIC:
        raise FormatError(f"bad QPT1 magic {magic!r}")
    if rank != 4:
        raise FormatError(f"QPT1 rank must be 4, found {rank}")
    count = int(np.prod(dims))
    start = offset + _HEAD.size
    end = start + 8 * count
    if end > len(buf):
        raise FormatError(f"truncated QPT1 payload: need {8 * count} bytes")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).astype(np.float64)
    return arr.reshape(dims), end


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after QPT1 frame")
    return arr


# ---------------------------------------------------------------------------
# チェックポイント
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """パラメータ・統計・オプティマイザ状態のスナップショット"""
    state: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)

    @property
    def val_psnr(self) -> Optional[float]:
        return self.meta.get("val_psnr")

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """
    チェックポイントを書き出す

    Args:
        path: 出力ファイルパス
        ckpt: Checkpoint
    """
    frames = []
    entries = []
    offset = 0
    for name, arr in ckpt.state.items():
        frame = encode_tensor(arr)
        entries.append({"name": name, "shape": list(np.asarray(arr).shape),
                        "offset": offset, "length": len(frame)})
        frames.append(frame)
        offset += len(frame)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    header = yaml.safe_dump(manifest, sort_keys=False, default_flow_style=None).encode("utf-8")
    with open(path, "wb") as f:
        f.write(header.rstrip(b"\n"))
        f.write(_HEADER_END)
        for frame in frames:
            f.write(frame)
    logger.info(f"Checkpoint saved: {path} ({len(entries)} tensors)")


def load_checkpoint(path) -> Checkpoint:
    """
    チェックポイントを読み込む（形式・バージョンを検証）
    """
    with open(path, "rb") as f:
        buf = f.read()
    cut = buf.find(_HEADER_END)
    if cut < 0:
        raise FormatError(f"{path}: checkpoint manifest terminator not found")
    try:
        manifest = yaml.safe_load(buf[:cut].decode("utf-8"))
    except yaml.YAMLError as e:
        raise FormatError(f"{path}: unreadable checkpoint manifest: {e}")
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    found = manifest.get("version")
    if found != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint format version mismatch: expected {CHECKPOINT_VERSION}, found {found}"
        )

    body = buf[cut + len(_HEADER_END):]
    state = {}
    for entry in manifest.get("tensors", []):
        arr, end = decode_tensor(body, entry["offset"])
        if end - entry["offset"] != entry["length"] or list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"{path}: tensor {entry['name']} does not match its manifest entry")
        state[entry["name"]] = arr
    return Checkpoint(state=state, meta=manifest.get("meta") or {})


# ---------------------------------------------------------------------------
# 画像
# ---------------------------------------------------------------------------

def write_pgm(path, grid: np.ndarray, lo: float, hi: float, unit: str = "") -> None:
    """
    16bit バイナリ PGM（P5, maxval 65535）を書き出す

    [lo, hi] を [0, 65535] に線形に割り当てる。スケールはコメント行に記す。
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise FormatError(f"PGM export needs a 2-axis grid, got shape {grid.shape}")
    if not hi > lo:
        raise FormatError(f"PGM value range must satisfy hi > lo, got [{lo}, {hi}]")
    h, w = grid.shape
    levels = np.clip(np.rint((grid - lo) / (hi - lo) * 65535.0), 0, 65535).astype(">u2")
    comment = f"# scale {lo!r} {hi!r} {unit}".rstrip()
    header = f"P5\n{comment}\n{w} {h}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(levels.tobytes(order="C"))


def load_grid(path) -> np.ndarray:
    """
    2 軸グリッドを読み込む

    .qpt は QPT1（N=C=1）として、その他は Pillow で読み込み [0, 1] に正規化する。
    """
    path = Path(path)
    if path.suffix.lower() == QPT_SUFFIX:
        arr = load_tensor(path)
        if arr.shape[0] != 1 or arr.shape[1] != 1:
            raise FormatError(f"{path}: expected N=C=1, got shape {arr.shape}")
        return arr[0, 0]

    if not PIL_AVAILABLE:
        raise FormatError(f"{path}: Pillow is required to read {path.suffix} images")
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            grid = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            grid = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return np.clip(grid, 0.0, 1.0)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
