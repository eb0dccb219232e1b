"""
nas.py - 接続探索エンジン

1. search: super-PRNet を 2 段階で学習
   - 事前学習: mixge のみ（θ は 0 に固定、全 w = 0.5）
   - 同時学習: mixge + α·binary + β·sparsity で全パラメータを更新
2. prune: w < σ の接続を落とし、入力の無い段・使われない段を不動点まで除去
3. materialize: 残った接続だけで NAS-PRNet を構築（重み・融合 BN なし）
4. export_architecture / import_architecture: アーキテクチャのテキスト形式

【Design constraints】
- Stage D1 is never removed for lack of consumers (the regression head reads it).
- Edges dropped by the threshold are gone before stage liveness is evaluated.
- The search keeps the best validation checkpoint among joint-phase epochs.
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .errors import ArchitectureError, ConfigError
from .formats import Checkpoint
from .harness import Dataset, run_epoch, snapshot, validation_pairs, validation_psnr
from .losses import LossConfig, add_weight_terms, binary_loss, mixge
from .optim import Adam
from .supernet import (
    ConnectionSet, Edge, PRNet, SuperNetConfig,
    build_supernet, candidate_edges, parse_source,
)
from .tensor import sigmoid


logger = logging.getLogger(__name__)

ARCH_HEADER = "# fringeforge architecture"


@dataclass
class SearchSchedule:
    """探索の学習スケジュール"""
    pretrain_epochs: int = 30
    joint_epochs: int = 60
    learning_rate: float = 0.008
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError(f"epochs must be ≥ 0, got {self.pretrain_epochs}/{self.joint_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")


@dataclass
class Architecture:
    """
    枝刈り後のアーキテクチャ

    provenance は (σ, 元チェックポイント名)。
    """
    stages: int
    kept_edges: List[Edge]
    kept_stages: List[int]
    provenance: Tuple[Optional[float], Optional[str]] = (None, None)

    def validate(self) -> None:
        """不変条件を検査（違反は ArchitectureError）"""
        L = self.stages
        stages = set(self.kept_stages)
        if 1 not in stages or not any(e.target == 1 for e in self.kept_edges):
            raise ArchitectureError("architecture collapsed: decoder stage D1 has no inputs")
        candidates = set(candidate_edges(L))
        for e in self.kept_edges:
            if e.kind == 'D' and e.index <= e.target:
                raise ArchitectureError(f"acyclicity violated: {e.source} -> D{e.target}")
            if e not in candidates:
                raise ArchitectureError(f"edge {e.name} is not a candidate connection for L={L}")
            if e.target not in stages:
                raise ArchitectureError(f"edge {e.name} targets a stage that is not kept")
            if e.kind == 'D' and e.index not in stages:
                raise ArchitectureError(f"edge {e.name} reads stage D{e.index}, which is not kept")
        for l in stages:
            if not any(e.target == l for e in self.kept_edges):
                raise ArchitectureError(f"stage D{l} has no input connections")
            if l != 1 and not any(e.kind == 'D' and e.index == l for e in self.kept_edges):
                raise ArchitectureError(f"stage D{l} feeds no other stage")

    @property
    def edge_names(self) -> List[str]:
        return [e.name for e in self.kept_edges]


@dataclass
class SearchResult:
    checkpoint: Checkpoint
    weight_history: List[Tuple[int, str, float]] = field(default_factory=list)
    history: List[Dict] = field(default_factory=list)
    net: Optional[PRNet] = None


# ---------------------------------------------------------------------------
# 探索
# ---------------------------------------------------------------------------

def search(cfg: SuperNetConfig, data: Dataset, sched: SearchSchedule, loss_cfg: LossConfig,
           seed: int = 0, sigma: float = 0.5) -> SearchResult:
    """
    super-PRNet の 2 段階学習

    最良チェックポイントは同時学習フェーズの検証 PSNR 最大のもの。ただし σ で
    枝刈りして有効なアーキテクチャになるチェックポイントがあればその中から選ぶ。

    Args:
        cfg: ネットワーク構成
        data: train / val 分割を持つ Dataset
        sched: SearchSchedule
        loss_cfg: LossConfig
        seed: 初期化とシャッフルの乱数シード
        sigma: 枝刈りしきい値（w ≥ σ の本数の記録とチェックポイント選択に使う）

    Returns:
        SearchResult（最良チェックポイント、重み履歴、エポック履歴、ネットワーク）
    """
    sched.validate()
    loss_cfg.validate()
    train_pairs = data.split('train')
    if not train_pairs:
        raise ValueError("search needs a non-empty training split (empty dataset)")
    val_pairs = validation_pairs(data)

    net = build_supernet(cfg, seed=seed)
    conns = net.connections
    optimizer = Adam(net.parameters(), lr=sched.learning_rate, betas=sched.betas, eps=sched.eps)
    rng = np.random.default_rng(seed)
    base_meta = {'kind': 'supernet', 'config': cfg.to_dict(), 'seed': int(seed),
                 'alpha': float(loss_cfg.alpha), 'beta': float(loss_cfg.beta)}

    best = snapshot(net, optimizer, {**base_meta, 'epoch': 0, 'phase': 'init', 'val_psnr': None})
    best_rank: Optional[Tuple[bool, float]] = None
    weight_history: List[Tuple[int, str, float]] = []
    history: List[Dict] = []
    recon_terms: List[float] = []

    def reconstruction(pred, gt):
        recon = mixge(pred, gt, loss_cfg.mixge_lambda)
        recon_terms.append(recon.item())
        return recon

    def synthesized(pred, gt):
        recon = reconstruction(pred, gt)
        return add_weight_terms(recon, conns.weight_tensors(), loss_cfg)

    network_params = net.network_parameters()
    total_epochs = sched.pretrain_epochs + sched.joint_epochs
    for epoch in range(1, total_epochs + 1):
        joint = epoch > sched.pretrain_epochs
        phase = 'joint' if joint else 'pretrain'
        recon_terms.clear()
        if joint:
            loss = run_epoch(net, train_pairs, optimizer, synthesized, rng)
        else:
            loss = run_epoch(net, train_pairs, optimizer, reconstruction, rng, step_params=network_params)
        recon_loss = float(np.mean(recon_terms))
        val = validation_psnr(net, val_pairs)

        weights = conns.weights()
        values = [weights[e] for e in conns.edges]
        b_loss = binary_loss(values, loss_cfg.clamp_eps).item()
        kept = sum(1 for w in values if w >= sigma)
        valid = prunes_cleanly(weights, sigma, cfg.stages)
        weight_history.extend((epoch, e.name, weights[e]) for e in conns.edges)
        history.append({'epoch': epoch, 'phase': phase, 'train_loss': loss, 'recon_loss': recon_loss,
                        'val_psnr': val, 'binary_loss': b_loss, 'kept': kept})
        logger.info(f"[search] epoch {epoch}/{total_epochs} ({phase}): loss {loss:.6f}, "
                    f"mixge {recon_loss:.6f}, val PSNR {val:.2f} dB, binary {b_loss:.4f}, "
                    f"w≥{sigma}: {kept}/{len(values)}")

        eligible = joint or sched.joint_epochs == 0
        rank = (valid, val)
        if eligible and (best_rank is None or rank > best_rank):
            best_rank = rank
            best = snapshot(net, optimizer, {**base_meta, 'epoch': epoch, 'phase': phase,
                                             'val_psnr': float(val)})

    if best_rank is not None and not best_rank[0]:
        logger.warning(f"No checkpoint prunes to a valid architecture at σ={sigma}; "
                       f"keeping epoch {best.epoch} (best validation PSNR)")
    return SearchResult(checkpoint=best, weight_history=weight_history, history=history, net=net)


def prunes_cleanly(weights: Mapping[Edge, float], sigma: float, L: int) -> bool:
    """σ での枝刈りが崩壊せずに終わるか"""
    try:
        prune(weights, sigma, stages=L)
    except ArchitectureError:
        return False
    return True


def checkpoint_weights(ckpt: Checkpoint, L: int) -> Dict[Edge, float]:
    """チェックポイントの θ から接続重み w を取り出す"""
    weights = {}
    for e in candidate_edges(L):
        key = f"theta.{e.name}"
        if key not in ckpt.state:
            raise ArchitectureError(f"checkpoint has no connection parameter {key}")
        weights[e] = sigmoid(float(np.asarray(ckpt.state[key]).reshape(-1)[0]))
    return weights


# ---------------------------------------------------------------------------
# 枝刈り
# ---------------------------------------------------------------------------

def prune(conns: Union[ConnectionSet, Mapping[Edge, float]], sigma: float = 0.5,
          stages: Optional[int] = None, source: Optional[str] = None) -> Architecture:
    """
    接続重みからアーキテクチャを抽出

    (i) w < σ の接続を削除
    (ii) 入力の無いデコーダ段を削除
    (iii) 出力が使われないデコーダ段を削除（D1 は対象外）
    (ii)(iii) は不動点まで繰り返す。

    Args:
        conns: ConnectionSet または 接続 → w の対応
        sigma: しきい値（0 < σ < 1）
        stages: 段数 L（None なら接続の宛先から推定）
        source: 元チェックポイント名（provenance 用）

    Returns:
        Architecture
    """
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    weights = conns.weights() if isinstance(conns, ConnectionSet) else dict(conns)
    if not weights:
        raise ArchitectureError("architecture collapsed: no connections to prune")
    L = stages if stages is not None else max(e.target for e in weights)

    kept: Set[Edge] = {e for e, w in weights.items() if w >= sigma}
    alive: Set[int] = set(range(1, L + 1))

    changed = True
    while changed:
        changed = False
        for l in sorted(alive):
            has_input = any(e.target == l for e in kept)
            has_consumer = l == 1 or any(e.kind == 'D' and e.index == l for e in kept)
            if has_input and has_consumer:
                continue
            if l == 1:
                raise ArchitectureError("architecture collapsed: decoder stage D1 has no inputs")
            alive.discard(l)
            kept = {e for e in kept if e.target != l and not (e.kind == 'D' and e.index == l)}
            changed = True

    order = {e: k for k, e in enumerate(candidate_edges(L))}
    arch = Architecture(stages=L, kept_edges=sorted(kept, key=order.__getitem__),
                        kept_stages=sorted(alive), provenance=(float(sigma), source))
    logger.info(f"Pruned to {len(arch.kept_edges)}/{len(weights)} connections, "
                f"stages {arch.kept_stages}")
    return arch


def materialize(arch: Architecture, cfg: SuperNetConfig, seed: int = 0) -> PRNet:
    """
    NAS-PRNet を構築

    融合は T'_l = Σ conv(f↓(m)) + Σ f↑(conv(m))（重み・BN なし）。パラメータは新規初期化。
    """
    arch.validate()
    if arch.stages != cfg.stages:
        raise ArchitectureError(f"architecture has L={arch.stages} but the network config has L={cfg.stages}")
    net = PRNet(cfg, edges=arch.kept_edges, stages=arch.kept_stages, weighted=False, seed=seed)
    logger.info(f"NAS-PRNet: {len(net.edges)} connections, stages {net.stages}, "
                f"{net.parameter_count()} parameters")
    return net


def network_from_meta(meta: Mapping, seed: Optional[int] = None) -> PRNet:
    """
    チェックポイントの meta から（未学習の）ネットワークを構築

    meta['kind'] が 'supernet' なら super-PRNet、'nasprnet' なら meta['architecture'] の
    NAS-PRNet。seed を省略すると meta['seed'] を使う。
    """
    kind = meta.get('kind')
    if 'config' not in meta:
        raise ArchitectureError("checkpoint meta has no network config")
    cfg = SuperNetConfig.from_dict(meta['config'])
    seed = int(meta.get('seed', 0)) if seed is None else seed
    if kind == 'supernet':
        return PRNet(cfg, weighted=True, seed=seed)
    if kind == 'nasprnet':
        if 'architecture' not in meta:
            raise ArchitectureError("NAS-PRNet checkpoint has no architecture")
        arch = import_architecture(meta['architecture'])
        return PRNet(cfg, edges=arch.kept_edges, stages=arch.kept_stages, weighted=False, seed=seed)
    raise ArchitectureError(f"unknown checkpoint kind {kind!r}")


def model_from_checkpoint(ckpt: Checkpoint) -> PRNet:
    """チェックポイントからネットワークを復元"""
    net = network_from_meta(ckpt.meta)
    net.load_state_dict(ckpt.state)
    return net


def full_architecture(L: int) -> Architecture:
    """枝刈りなしのアーキテクチャ（全候補接続・全段）"""
    return Architecture(stages=L, kept_edges=candidate_edges(L),
                        kept_stages=list(range(1, L + 1)), provenance=(None, 'full'))


# ---------------------------------------------------------------------------
# テキスト形式
# ---------------------------------------------------------------------------

def export_architecture(arch: Architecture) -> str:
    """
    アーキテクチャをテキストに

    stages L / provenance sigma=… source=… / edge SRC DST の行
    """
    arch.validate()
    sigma, source = arch.provenance
    prov = []
    if sigma is not None:
        prov.append(f"sigma={sigma!r}")
    if source is not None:
        prov.append(f"source={source}")
    lines = [ARCH_HEADER, f"stages {arch.stages}"]
    if prov:
        lines.append("provenance " + " ".join(prov))
    lines += [f"edge {e.source} D{e.target}" for e in arch.kept_edges]
    return "\n".join(lines) + "\n"


def import_architecture(text: str) -> Architecture:
    """
    export_architecture の逆変換

    不正な行は行番号付きの ArchitectureError。
    """
    L: Optional[int] = None
    sigma: Optional[float] = None
    source: Optional[str] = None
    raw_edges: List[Tuple[int, str, str]] = []

    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split('#', 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        directive = parts[0]
        if directive == 'stages':
            if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) < 1:
                raise ArchitectureError(f"line {lineno}: malformed stages directive {body!r}")
            L = int(parts[1])
        elif directive == 'provenance':
            for token in parts[1:]:
                key, sep, value = token.partition('=')
                if not sep:
                    raise ArchitectureError(f"line {lineno}: malformed provenance token {token!r}")
                if key == 'sigma':
                    try:
                        sigma = float(value)
                    except ValueError:
                        raise ArchitectureError(f"line {lineno}: sigma must be a number, got {value!r}")
                elif key == 'source':
                    source = value
                else:
                    raise ArchitectureError(f"line {lineno}: unknown provenance key {key!r}")
        elif directive == 'edge':
            if len(parts) != 3:
                raise ArchitectureError(f"line {lineno}: expected `edge SRC DST`, got {body!r}")
            raw_edges.append((lineno, parts[1], parts[2]))
        else:
            raise ArchitectureError(f"line {lineno}: unknown directive {directive!r}")

    if L is None:
        indices = [int(tok[1:]) for _, s, d in raw_edges for tok in (s, d)
                   if len(tok) > 1 and tok[0] in 'ED' and tok[1:].isdigit()]
        L = max(indices) if indices else 1

    edges: List[Edge] = []
    seen: Set[Edge] = set()
    for lineno, src, dst in raw_edges:
        try:
            src = parse_source(src, L)
        except ArchitectureError as e:
            raise ArchitectureError(f"line {lineno}: {e}")
        if len(dst) < 2 or dst[0] != 'D' or not dst[1:].isdigit() or not 1 <= int(dst[1:]) <= L:
            raise ArchitectureError(f"line {lineno}: target must be D1..D{L}, got {dst!r}")
        edge = Edge(src, int(dst[1:]))
        if edge.kind == 'D' and edge.index <= edge.target:
            raise ArchitectureError(f"line {lineno}: acyclicity violated: {src} -> {dst}")
        if edge in seen:
            raise ArchitectureError(f"line {lineno}: duplicate edge {edge.name}")
        seen.add(edge)
        edges.append(edge)

    order = {e: k for k, e in enumerate(candidate_edges(L))}
    arch = Architecture(stages=L, kept_edges=sorted(edges, key=order.__getitem__),
                        kept_stages=sorted({e.target for e in edges}), provenance=(sigma, source))
    arch.validate()
    return arch


def save_architecture(arch: Architecture, path) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(export_architecture(arch))


def load_architecture(path) -> Architecture:
    with open(path, 'r', encoding='utf-8') as f:
        return import_architecture(f.read())


def write_weight_history(rows: Sequence[Tuple[int, str, float]], path) -> None:
    """接続重みの履歴 CSV（epoch, edge, w）"""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch', 'edge', 'w'])
        for epoch, edge, w in rows:
            writer.writerow([epoch, edge, f"{w:.8f}"])
