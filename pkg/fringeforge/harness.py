"""
harness.py - 実験ハーネス

合成データセットの生成・保存、位相の正規化、PSNR、学習ループ、
テスト評価、推論レイテンシ計測をまとめる。

【Design constraints】
- Ground truth is φ / phase_max clamped to [0, 1].
- Training is sequential with batch size 1; the order of updates is fixed by
  the seed.
- Evaluation runs per-image forward passes in a thread pool; results are
  reduced in test-split order.
"""

import csv
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .classical import (
    AberrationSpec, FringeSpec, PhaseMap,
    classical_round_trip, render_interferogram, synth_phase,
)
from .config import worker_threads
from .errors import ConfigError, FormatError, ShapeError
from .fft import is_power_of_two
from .formats import Checkpoint, ensure_dir, load_tensor, save_tensor
from .losses import mixge
from .optim import Adam
from .tensor import Tape, Tensor


logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
PSNR_EXACT_DB = 99.0
MANIFEST_NAME = 'manifest.txt'
DATASET_VERSION = 1

# 干渉縞スタイルのプリセット（config.yaml の styles で上書き可）
STYLE_PRESETS = {
    'A': {'carrier_fx': 10.0, 'carrier_fy': 6.0, 'contrast': 0.8, 'background': 0.5,
          'noise_sigma': 0.0, 'tilt_x': 0.02, 'tilt_y': -0.01, 'quadratic': 0.0004},
    'B': {'carrier_fx': -6.0, 'carrier_fy': 11.0, 'contrast': 0.55, 'background': 0.5,
          'noise_sigma': 0.0, 'tilt_x': -0.015, 'tilt_y': 0.025, 'quadratic': -0.0003},
}


@dataclass
class Dataset:
    """干渉縞と正規化済み正解位相の組"""
    pairs: List[Tuple[np.ndarray, np.ndarray]]
    splits: Dict[str, List[int]]
    phase_max: float = 12.0
    fringe_style: str = 'A'
    labels: str = 'analytic'
    seed: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def size(self) -> int:
        return self.pairs[0][0].shape[0] if self.pairs else 0

    def split(self, name: str) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [self.pairs[i] for i in self.splits.get(name, [])]


@dataclass
class Metrics:
    """テスト指標（latency_ms は計測した場合のみ）"""
    psnr_db: float
    mixge: float
    latency_ms: Optional[float] = None


def fringe_style(name: str, styles: Optional[Mapping] = None) -> Tuple[FringeSpec, AberrationSpec]:
    """
    名前付きスタイルから FringeSpec と AberrationSpec を作る

    Args:
        name: スタイル名（'A', 'B' など）
        styles: config.yaml の styles セクション（None ならプリセット）
    """
    table = dict(STYLE_PRESETS)
    if styles:
        table.update(styles)
    if name not in table:
        raise ConfigError(f"unknown fringe style {name!r}; available: {sorted(table)}")
    s = {**STYLE_PRESETS.get(name, {}), **table[name]}
    missing = [k for k in ('carrier_fx', 'carrier_fy', 'contrast', 'background') if k not in s]
    if missing:
        raise ConfigError(f"fringe style {name!r} lacks {missing}")
    fr = FringeSpec(carrier_fx=float(s['carrier_fx']), carrier_fy=float(s['carrier_fy']),
                    contrast=float(s['contrast']), background=float(s['background']),
                    noise_sigma=float(s.get('noise_sigma', 0.0)))
    ab = AberrationSpec(tilt_x=float(s.get('tilt_x', 0.0)), tilt_y=float(s.get('tilt_y', 0.0)),
                        quadratic=float(s.get('quadratic', 0.0)))
    return fr, ab


# ---------------------------------------------------------------------------
# 正規化・指標
# ---------------------------------------------------------------------------

def _grid(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, PhaseMap):
        return x.grid
    return np.asarray(x, dtype=np.float64)


def normalize_phase(p: Union[PhaseMap, np.ndarray], phase_max: float = 12.0) -> Tensor:
    """[0, phase_max] に切り詰めて phase_max で割る → [1,1,H,W]"""
    grid = _grid(p)
    return Tensor.from_grid(np.clip(grid, 0.0, phase_max) / phase_max)


def denormalize_phase(t: Union[Tensor, np.ndarray], phase_max: float = 12.0) -> PhaseMap:
    """[0, 1] の出力を rad に戻す"""
    grid = _grid(t)
    if grid.ndim == 4:
        grid = grid[0, 0]
    return PhaseMap(np.clip(grid, 0.0, 1.0) * phase_max, wrapped=False)


def psnr(pred, gt) -> float:
    """
    正規化領域（ピーク 1）での PSNR [dB]

    MSE = 0（完全一致）は番兵値 99 dB を返す。それ以外の値に上限は設けない。
    """
    a, b = _grid(pred), _grid(gt)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: prediction shape {a.shape} does not match ground truth {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_EXACT_DB
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# データセット
# ---------------------------------------------------------------------------

def _split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    counts = [int(round(f * n)) for f in fractions[:2]]
    counts.append(n - sum(counts))
    # 正の比率を持つ分割は最低 1 件
    for k, f in enumerate(fractions):
        while f > 0 and counts[k] < 1:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[k] += 1
    return counts


def make_dataset(n: int, size: int, fringe: FringeSpec, ab: AberrationSpec, seed: int = 0,
                 split: Sequence[float] = (0.6667, 0.1667, 0.1666), labels: str = 'analytic',
                 max_blobs: int = 5, phase_max: float = 12.0, style: str = 'A',
                 stages: Optional[int] = None) -> Dataset:
    """
    合成データセットを生成

    各ペアは synth_phase → render_interferogram。正解は解析的な位相
    （labels='classical' なら従来法パイプラインの出力）を正規化したもの。

    Args:
        n: ペア数（≥ 3）
        size: 画像の一辺（2 のべき乗）
        fringe, ab: 干渉縞スタイルと収差
        seed: 乱数シード
        split: train/val/test の比率（和が 1）
        labels: 'analytic' または 'classical'
        max_blobs: 1 画像あたりのガウス塊の最大数
        phase_max: 正規化の上限（rad）
        style: スタイル名（記録用）
        stages: ネットワーク段数（指定時は size が 2^L で割り切れることを確認）

    Returns:
        Dataset
    """
    if n < 3:
        raise ValueError(f"dataset needs n ≥ 3 to form train/val/test splits, got {n}")
    if not is_power_of_two(size):
        raise ShapeError(f"size must be a power of two, got {size}")
    if stages is not None and size % (2 ** stages):
        raise ShapeError(f"size {size} must be divisible by 2^L = {2 ** stages}")
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-3:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {list(split)}")
    if labels not in ('analytic', 'classical'):
        raise ConfigError(f"labels must be 'analytic' or 'classical', got {labels!r}")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    counts = _split_sizes(n, split)
    bounds = np.cumsum([0] + counts)
    splits = {name: sorted(int(i) for i in perm[bounds[k]:bounds[k + 1]])
              for k, name in enumerate(SPLITS)}

    pairs = []
    for _ in range(n):
        n_blobs = int(rng.integers(1, max_blobs + 1))
        sample_seed = int(rng.integers(0, 2 ** 32))
        phase = synth_phase(size, size, n_blobs, phase_max, seed=sample_seed)
        if labels == 'classical':
            result = classical_round_trip(phase, ab, fringe, seed=sample_seed)
            label = result['compensated']
        else:
            label = phase
        ig = render_interferogram(phase, ab, fringe, seed=sample_seed)
        pairs.append((ig.grid, normalize_phase(label, phase_max).data[0, 0]))

    logger.info(f"Dataset: {n} pairs of {size}x{size}, style {style}, labels {labels}, "
                f"split {counts[0]}/{counts[1]}/{counts[2]}")
    return Dataset(pairs=pairs, splits=splits, phase_max=phase_max, fringe_style=style,
                   labels=labels, seed=seed)


def save_dataset(data: Dataset, directory) -> Path:
    """
    データセットをディレクトリに保存

    pair_XXXX_ig.qpt / pair_XXXX_gt.qpt と manifest.txt（ヘッダ 1 行 + 1 ペア 1 行）
    """
    out = ensure_dir(directory)
    owner = {i: name for name in SPLITS for i in data.splits.get(name, [])}
    lines = [
        f"# fringeforge-dataset version={DATASET_VERSION} n={len(data)} size={data.size} "
        f"seed={data.seed} style={data.fringe_style} labels={data.labels} "
        f"phase_max={data.phase_max!r}"
    ]
    for idx, (ig, gt) in enumerate(data.pairs):
        ig_name = f"pair_{idx:04d}_ig.qpt"
        gt_name = f"pair_{idx:04d}_gt.qpt"
        save_tensor(out / ig_name, ig)
        save_tensor(out / gt_name, gt)
        lines.append(f"{idx} {owner[idx]} {ig_name} {gt_name}")
    with open(out / MANIFEST_NAME, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info(f"Dataset saved: {out} ({len(data)} pairs)")
    return out


def load_dataset(directory) -> Dataset:
    """save_dataset で書いたディレクトリを読み込む"""
    root = Path(directory)
    manifest = root / MANIFEST_NAME
    with open(manifest, 'r', encoding='utf-8') as f:
        lines = [line.rstrip('\n') for line in f if line.strip()]
    if not lines or not lines[0].startswith('# fringeforge-dataset'):
        raise FormatError(f"{manifest}: missing fringeforge-dataset header")
    header = dict(tok.split('=', 1) for tok in lines[0].split()[2:] if '=' in tok)
    if header.get('version') != str(DATASET_VERSION):
        raise FormatError(
            f"{manifest}: dataset format version mismatch: expected {DATASET_VERSION}, found {header.get('version')}"
        )

    pairs = []
    splits: Dict[str, List[int]] = {name: [] for name in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 4 or not parts[0].isdigit() or parts[1] not in SPLITS:
            raise FormatError(f"{manifest}:{lineno}: malformed pair line {line!r}")
        idx = int(parts[0])
        if idx != len(pairs):
            raise FormatError(f"{manifest}:{lineno}: expected pair index {len(pairs)}, found {idx}")
        ig = load_tensor(root / parts[2])[0, 0]
        gt = load_tensor(root / parts[3])[0, 0]
        pairs.append((ig, gt))
        splits[parts[1]].append(idx)

    return Dataset(pairs=pairs, splits=splits, phase_max=float(header.get('phase_max', 12.0)),
                   fringe_style=header.get('style', 'A'), labels=header.get('labels', 'analytic'),
                   seed=int(header.get('seed', 0)))


def crop_pair(ig: np.ndarray, gt: np.ndarray, crop: int,
              rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """同じ位置で crop×crop を切り出す"""
    h, w = ig.shape
    if crop > h or crop > w:
        raise ShapeError(f"crop {crop} exceeds image size {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    window = (slice(top, top + crop), slice(left, left + crop))
    return ig[window], gt[window]


# ---------------------------------------------------------------------------
# 学習
# ---------------------------------------------------------------------------

LossFn = Callable[[Tensor, Tensor], Tensor]


def run_epoch(model, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], optimizer: Adam,
              loss_fn: LossFn, rng: np.random.Generator, crop: Optional[int] = None,
              step_params=None) -> float:
    """
    1 エポック（バッチサイズ 1、シャッフル順）

    Returns:
        平均損失
    """
    model.train()
    total = 0.0
    for k in rng.permutation(len(pairs)):
        ig, gt = pairs[k]
        if crop:
            ig, gt = crop_pair(ig, gt, crop, rng)
        optimizer.zero_grad()
        with Tape() as tape:
            pred = model.forward(Tensor.from_grid(ig), training=True)
            loss = loss_fn(pred, Tensor.from_grid(gt))
        tape.backward(loss)
        optimizer.step(step_params)
        total += loss.item()
    return total / len(pairs)


def _predict_all(model, pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                 threads: Optional[int] = None) -> List[np.ndarray]:
    if hasattr(model, 'eval'):
        model.eval()
    threads = threads or worker_threads()
    inputs = [ig for ig, _ in pairs]
    if threads <= 1 or len(inputs) <= 1:
        return [model.predict(ig) for ig in inputs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(model.predict, inputs))


def validation_psnr(model, pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                    threads: Optional[int] = None) -> float:
    preds = _predict_all(model, pairs, threads)
    return float(np.mean([psnr(p, gt) for p, (_, gt) in zip(preds, pairs)]))


def validation_pairs(data: Dataset) -> List[Tuple[np.ndarray, np.ndarray]]:
    pairs = data.split('val')
    if not pairs:
        logger.warning("Validation split is empty; validating on the training split")
        pairs = data.split('train')
    return pairs


def snapshot(model, optimizer: Optional[Adam], meta: Mapping) -> Checkpoint:
    state = model.state_dict()
    if optimizer is not None:
        state.update(optimizer.state_dict())
    return Checkpoint(state=state, meta=dict(meta))


def train(model, data: Dataset, epochs: int, lr: float, seed: int = 0,
          crop: Optional[int] = None, mixge_lambda: float = 1.0,
          meta: Optional[Mapping] = None) -> Tuple[Checkpoint, List[Dict]]:
    """
    NAS-PRNet を mixge のみで学習

    各エポック後に検証 PSNR を計算し、最良のチェックポイントを保持する。

    Args:
        model: PRNet
        data: Dataset
        epochs: エポック数（0 なら初期状態を返す）
        lr: 学習率
        seed: シャッフル順の乱数シード
        crop: 学習時の切り出しサイズ（None なら全体）
        mixge_lambda: mixge の勾配項の重み
        meta: チェックポイントに追記するメタ情報

    Returns:
        (最良チェックポイント, 履歴 [{'epoch', 'train_loss', 'val_psnr'}])
    """
    if epochs < 0:
        raise ValueError(f"epochs must be ≥ 0, got {epochs}")
    train_pairs = data.split('train')
    if not train_pairs:
        raise ValueError("training split is empty")
    val_pairs = validation_pairs(data)

    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parameters(), lr=lr)
    extra = dict(meta or {})
    best = snapshot(model, optimizer, {**extra, 'epoch': 0, 'val_psnr': None})
    history: List[Dict] = []

    def loss_fn(pred, gt):
        return mixge(pred, gt, mixge_lambda)

    for epoch in range(1, epochs + 1):
        loss = run_epoch(model, train_pairs, optimizer, loss_fn, rng, crop)
        val = validation_psnr(model, val_pairs)
        history.append({'epoch': epoch, 'train_loss': loss, 'val_psnr': val})
        logger.info(f"[train] epoch {epoch}/{epochs}: loss {loss:.6f}, val PSNR {val:.2f} dB")
        if best.val_psnr is None or val > best.val_psnr:
            best = snapshot(model, optimizer, {**extra, 'epoch': epoch, 'val_psnr': float(val)})
    return best, history


# ---------------------------------------------------------------------------
# 評価
# ---------------------------------------------------------------------------

def evaluate(model, data: Dataset, split: str = 'test', threads: Optional[int] = None,
             mixge_lambda: float = 1.0, latency_repeats: Optional[int] = None) -> Metrics:
    """
    テスト分割での平均 PSNR と平均 mixge

    model は predict(grid) -> grid を持てばよい。latency_repeats を渡すと
    データセットの画像サイズで measure_latency を実行し latency_ms に入れる。
    """
    pairs = data.split(split)
    if not pairs:
        raise ValueError(f"{split} split is empty")
    preds = _predict_all(model, pairs, threads)
    scores = [psnr(p, gt) for p, (_, gt) in zip(preds, pairs)]
    errors = [mixge(Tensor.from_grid(p), Tensor.from_grid(gt), mixge_lambda).item()
              for p, (_, gt) in zip(preds, pairs)]
    latency = None
    if latency_repeats is not None:
        latency = measure_latency(model, pairs[0][0].shape[0], latency_repeats)
    return Metrics(psnr_db=float(np.mean(scores)), mixge=float(np.mean(errors)), latency_ms=latency)


def measure_latency(model, size: int, repeats: int = 5, seed: int = 0) -> float:
    """
    単一画像の推論時間の中央値 [ms]（1 回のウォームアップ後）
    """
    if repeats < 3:
        raise ValueError(f"repeats must be ≥ 3, got {repeats}")
    if hasattr(model, 'eval'):
        model.eval()
    grid = np.random.default_rng(seed).uniform(0.0, 1.0, size=(size, size))
    model.predict(grid)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(grid)
        samples.append((time.perf_counter() - t0) * 1000.0)
    return float(statistics.median(samples))


# ---------------------------------------------------------------------------
# 出力
# ---------------------------------------------------------------------------

def write_metrics_csv(history: Sequence[Mapping], path) -> None:
    """エポック履歴を CSV に書く（列は先頭行のキー順）"""
    columns = list(history[0].keys()) if history else ['epoch', 'train_loss', 'val_psnr']
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in history:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def write_summary(values: Mapping, path) -> None:
    """key: value 形式の要約"""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for key, value in values.items():
            if value is None:
                continue
            f.write(f"{key}: {_fmt(value)}\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
