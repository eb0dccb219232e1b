"""
supernet.py - 位相復元ネットワーク（super-PRNet / NAS-PRNet）

エンコーダ特徴 E_1..E_L、グラウンド特徴 G、デコーダ特徴 D_1..D_L からなる
エンコーダ・デコーダ網。候補接続は
    E_i → D_l（全 i, l）、G → D_l（全 l）、D_j → D_l（j > l）
で、super-PRNet は各接続を重み w = sigmoid(θ) で融合する（weighted=True）。
NAS-PRNet は残った接続だけを重みも融合 BN も無しで加算する（weighted=False）。

【Design constraints】
- Decoding runs from stage L down to 1; a stage only reads D_j with j > l.
- Encoder stub: one stride-2 conv → bn → relu6 per stage (dyadic pyramid).
- Convolutions on fusion branches are independent per edge.
- Fusion-branch batch norm is non-affine, so a branch's scale is set by w alone.
- Forward passes in eval mode never mutate the network and may run in parallel.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ConfigError, ShapeError
from .tensor import Parameter, RunningStats, Tensor


logger = logging.getLogger(__name__)

REFERENCE_ENCODER_DEPTHS = [8, 16, 24, 32, 48, 64, 96, 160]
GROUND = 'G'


@dataclass
class SuperNetConfig:
    """
    ネットワーク構成

    decoder_depth(l) = min(depth_cap, depth_slope·l)
    """
    stages: int = 4
    input_size: Tuple[int, int] = (64, 64)
    encoder_depths: Optional[List[int]] = None
    depth_cap: int = 64
    depth_slope: int = 8
    ground_pool: Tuple[int, int] = (3, 3)

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.ground_pool = tuple(self.ground_pool)
        if self.encoder_depths is None:
            depths = list(REFERENCE_ENCODER_DEPTHS)
            while len(depths) < self.stages:
                depths.append(depths[-1])
            self.encoder_depths = depths[:self.stages]
        else:
            self.encoder_depths = [int(d) for d in self.encoder_depths][:self.stages]

    @classmethod
    def from_dict(cls, d: Mapping) -> 'SuperNetConfig':
        known = {'stages', 'input_size', 'encoder_depths', 'depth_cap', 'depth_slope', 'ground_pool'}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown supernet keys: {sorted(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> Dict:
        return {
            'stages': self.stages,
            'input_size': list(self.input_size),
            'encoder_depths': list(self.encoder_depths),
            'depth_cap': self.depth_cap,
            'depth_slope': self.depth_slope,
            'ground_pool': list(self.ground_pool),
        }

    def decoder_depth(self, l: int) -> int:
        return min(self.depth_cap, self.depth_slope * l)

    def encoder_depth(self, l: int) -> int:
        return self.encoder_depths[l - 1]

    def validate(self) -> None:
        L = self.stages
        if L < 2:
            raise ConfigError(f"supernet needs at least 2 stages, got {L}")
        if len(self.encoder_depths) < L:
            raise ConfigError(f"encoder_depths lists {len(self.encoder_depths)} depths for {L} stages")
        if min(self.encoder_depths) < 1 or self.depth_cap < 1 or self.depth_slope < 1:
            raise ConfigError("feature depths must be ≥ 1")
        check_input_size(self, *self.input_size)


def check_input_size(cfg: SuperNetConfig, h: int, w: int) -> None:
    factor = 2 ** cfg.stages
    if h % factor or w % factor:
        raise ShapeError(f"input size {h}x{w} must be divisible by 2^L = {factor}")
    ph, pw = cfg.ground_pool
    if h // factor < ph or w // factor < pw:
        raise ShapeError(
            f"input size {h}x{w} leaves E_{cfg.stages} at {h // factor}x{w // factor}, "
            f"smaller than the {ph}x{pw} ground pool"
        )


# ---------------------------------------------------------------------------
# 候補接続
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Edge:
    """候補接続 source → D_target（source は 'E3', 'G', 'D4' の形）"""
    source: str
    target: int

    @property
    def name(self) -> str:
        return f"{self.source}->D{self.target}"

    @property
    def kind(self) -> str:
        return self.source[0]

    @property
    def index(self) -> Optional[int]:
        if self.source == GROUND:
            return None
        return int(self.source[1:])

    def is_downsampling(self) -> bool:
        """入力の空間サイズが h_l より大きい（E_i, i < l）"""
        return self.kind == 'E' and self.index < self.target

    def __str__(self):
        return self.name


def candidate_edges(L: int) -> List[Edge]:
    """
    全候補接続を正準順で列挙

    各 l = 1..L について E_1..E_L, G, D_{l+1}..D_L の順。
    """
    edges = []
    for l in range(1, L + 1):
        edges.extend(Edge(f"E{i}", l) for i in range(1, L + 1))
        edges.append(Edge(GROUND, l))
        edges.extend(Edge(f"D{j}", l) for j in range(l + 1, L + 1))
    return edges


def count_candidate_connections(L: int) -> int:
    """L(L+1) + L(L−1)/2"""
    if L < 1:
        raise ValueError(f"stage count must be ≥ 1, got {L}")
    return L * (L + 1) + L * (L - 1) // 2


def parse_source(token: str, L: int) -> str:
    """'E3' / 'G' / 'D4' を検証して返す"""
    if token == GROUND:
        return token
    if len(token) >= 2 and token[0] in 'ED' and token[1:].isdigit():
        idx = int(token[1:])
        if 1 <= idx <= L:
            return token
    raise ArchitectureError(f"unknown source {token!r} (expected E1..E{L}, G or D1..D{L})")


class ConnectionSet:
    """
    接続重み集合 W

    各候補接続に潜在パラメータ θ（初期値 0）を持ち、w = sigmoid(θ)。
    """

    def __init__(self, edges: Sequence[Edge]):
        self.edges = list(edges)
        self.thetas: Dict[Edge, Parameter] = {
            e: Parameter(np.zeros((1, 1, 1, 1)), name=f"theta.{e.name}") for e in self.edges
        }

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, edge: Edge) -> bool:
        return edge in self.thetas

    def parameters(self) -> List[Parameter]:
        return [self.thetas[e] for e in self.edges]

    def weight(self, edge: Edge) -> Tensor:
        """w = sigmoid(θ)（テープ上に記録）"""
        return T.sigmoid(self.thetas[edge])

    def weight_tensors(self) -> List[Tensor]:
        return [self.weight(e) for e in self.edges]

    def weights(self) -> Dict[Edge, float]:
        return {e: T.sigmoid(self.thetas[e].item()) for e in self.edges}

    def set_thetas(self, values: Mapping[Edge, float]) -> None:
        for e, v in values.items():
            self.thetas[e].data[...] = float(v)

    def set_weights(self, values: Mapping[Edge, float], limit: float = 40.0) -> None:
        """w を直接設定（θ = logit(w)、|θ| ≤ limit）"""
        thetas = {}
        for e, w in values.items():
            w = min(max(float(w), 1e-300), 1.0)
            theta = limit if w >= 1.0 else float(np.log(w) - np.log1p(-w))
            thetas[e] = min(max(theta, -limit), limit)
        self.set_thetas(thetas)


# ---------------------------------------------------------------------------
# 層
# ---------------------------------------------------------------------------

def glorot_kernel(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (9 * c_in + 9 * c_out))
    return rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))


class Conv3x3:
    """3×3 畳み込み層"""

    def __init__(self, c_in: int, c_out: int, name: str, rng: np.random.Generator, stride: int = 1):
        self.kernel = Parameter(glorot_kernel(rng, c_out, c_in), name=f"{name}.kernel")
        self.bias = Parameter(np.zeros((1, c_out, 1, 1)), name=f"{name}.bias")
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, self.stride)

    def parameters(self) -> List[Parameter]:
        return [self.kernel, self.bias]


class BatchNorm2d:
    """
    バッチ正規化層（γ=1, β=0 で初期化）

    affine=False なら γ, β は定数（学習しない）。
    """

    def __init__(self, channels: int, name: str, momentum: float = 0.1, epsilon: float = 1e-5,
                 affine: bool = True):
        self.name = name
        self.affine = affine
        if affine:
            self.gamma = Parameter(np.ones((1, channels, 1, 1)), name=f"{name}.gamma")
            self.beta = Parameter(np.zeros((1, channels, 1, 1)), name=f"{name}.beta")
        else:
            self.gamma = Tensor(np.ones((1, channels, 1, 1)))
            self.beta = Tensor(np.zeros((1, channels, 1, 1)))
        self.stats = RunningStats(channels, momentum)
        self.epsilon = epsilon

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.epsilon, training, self.stats)

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta] if self.affine else []

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.stats.mean,
                f"{self.name}.running_var": self.stats.var}

    def load_buffers(self, state: Mapping[str, np.ndarray]) -> None:
        self.stats.mean = np.array(state[f"{self.name}.running_mean"], dtype=np.float64)
        self.stats.var = np.array(state[f"{self.name}.running_var"], dtype=np.float64)


class _Branch:
    """
    融合ブランチ（1 本の候補接続の変換）

    融合 BN は γ/β を持たない（ブランチの大きさは w だけで決まる）。
    """

    def __init__(self, edge: Edge, c_in: int, c_out: int, rng: np.random.Generator, with_bn: bool):
        prefix = f"fuse.{edge.name}"
        self.edge = edge
        self.conv = Conv3x3(c_in, c_out, f"{prefix}.conv", rng)
        self.bn = BatchNorm2d(c_out, f"{prefix}.bn", affine=False) if with_bn else None

    def __call__(self, m: Tensor, h: int, w: int, training: bool) -> Tensor:
        if self.edge.is_downsampling():
            y = self.conv(T.bilinear_resize(m, h, w))
        else:
            y = T.bilinear_resize(self.conv(m), h, w)
        if self.bn is not None:
            y = self.bn(y, training)
        return y


@dataclass
class StageFeatures:
    """エンコーダ特徴 E、グラウンド特徴 G、デコーダ特徴 D"""
    E: List[Tensor]
    G: Tensor
    D: Dict[int, Tensor] = field(default_factory=dict)

    def source(self, token: str, target: int) -> Tensor:
        if token == GROUND:
            return self.G
        idx = int(token[1:])
        if token[0] == 'E':
            return self.E[idx - 1]
        if idx not in self.D:
            raise ArchitectureError(f"stage D{target} reads D{idx} before it was decoded")
        return self.D[idx]


# ---------------------------------------------------------------------------
# ネットワーク
# ---------------------------------------------------------------------------

class PRNet:
    """
    位相復元ネットワーク

    Args:
        cfg: SuperNetConfig
        edges: 使う接続（None なら全候補 = super-PRNet）
        stages: 残すデコーダ段（None なら edges の宛先すべて）
        weighted: True なら w·bn(...) の重み付き融合、False なら単純和
        seed: 初期化の乱数シード
    """

    def __init__(self, cfg: SuperNetConfig, edges: Optional[Iterable[Edge]] = None,
                 stages: Optional[Iterable[int]] = None, weighted: bool = True, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.weighted = weighted
        self.training = True
        L = cfg.stages

        order = {e: k for k, e in enumerate(candidate_edges(L))}
        chosen = list(candidate_edges(L)) if edges is None else list(edges)
        for e in chosen:
            if e not in order:
                raise ArchitectureError(f"edge {e.name} is not a candidate connection for L={L}")
        self.edges = sorted(set(chosen), key=order.__getitem__)
        self.stages = sorted(set(stages) if stages is not None else {e.target for e in self.edges})
        if 1 not in self.stages:
            raise ArchitectureError("architecture collapsed: decoder stage D1 is missing")

        rng = np.random.default_rng(seed)
        self.encoder: List[Tuple[Conv3x3, BatchNorm2d]] = []
        c_prev = 1
        for l in range(1, L + 1):
            c = cfg.encoder_depth(l)
            self.encoder.append((Conv3x3(c_prev, c, f"enc.{l}.conv", rng, stride=2),
                                 BatchNorm2d(c, f"enc.{l}.bn")))
            c_prev = c

        self.branches: Dict[Edge, _Branch] = {}
        for e in self.edges:
            self.branches[e] = _Branch(e, self._source_depth(e.source), cfg.decoder_depth(e.target),
                                       rng, with_bn=weighted)

        self.decoder: Dict[int, Tuple[Conv3x3, BatchNorm2d]] = {}
        for l in sorted(self.stages, reverse=True):
            d = cfg.decoder_depth(l)
            self.decoder[l] = (Conv3x3(d, d, f"dec.{l}.conv", rng), BatchNorm2d(d, f"dec.{l}.bn"))

        self.head = Conv3x3(cfg.decoder_depth(1), 1, "head.conv", rng)
        self.connections = ConnectionSet(self.edges) if weighted else None

    def _source_depth(self, token: str) -> int:
        if token == GROUND:
            return self.cfg.encoder_depth(self.cfg.stages)
        idx = int(token[1:])
        if token[0] == 'E':
            return self.cfg.encoder_depth(idx)
        return self.cfg.decoder_depth(idx)

    # -- モード -------------------------------------------------------------

    def train(self) -> 'PRNet':
        self.training = True
        return self

    def eval(self) -> 'PRNet':
        self.training = False
        return self

    # -- 計算 ---------------------------------------------------------------

    def encode(self, img: Tensor, training: Optional[bool] = None) -> StageFeatures:
        """E_l = relu6(bn(conv_s2(E_{l−1})))、G = avg_pool_to(E_L, 3, 3)"""
        training = self.training if training is None else training
        _, c, h, w = img.shape
        if c != 1:
            raise ShapeError(f"PRNet expects a single-channel interferogram, got C={c}")
        check_input_size(self.cfg, h, w)
        feats = []
        x = img
        for conv, bn in self.encoder:
            x = T.relu6(bn(conv(x), training))
            feats.append(x)
        ground = T.avg_pool_to(x, *self.cfg.ground_pool)
        return StageFeatures(E=feats, G=ground)

    def stage_inputs(self, l: int) -> List[Edge]:
        return [e for e in self.edges if e.target == l]

    def fuse(self, l: int, feats: StageFeatures, training: Optional[bool] = None) -> Tensor:
        """
        段 l の融合特徴 T_l

        weighted なら Σ w·bn(変換(m))、そうでなければ Σ 変換(m)（bn なし）
        """
        training = self.training if training is None else training
        inputs = self.stage_inputs(l)
        if not inputs:
            raise ArchitectureError(f"decoder stage D{l} has no input connections")
        _, _, h, w = feats.E[l - 1].shape
        branches = [self.branches[e](feats.source(e.source, l), h, w, training) for e in inputs]
        if self.weighted:
            weights = [self.connections.weight(e) for e in inputs]
        else:
            weights = [1.0] * len(inputs)
        return T.weighted_sum(branches, weights)

    def decode_stage(self, l: int, t: Tensor, training: Optional[bool] = None) -> Tensor:
        """D_l = relu6(bn(conv(relu6(T_l))))"""
        training = self.training if training is None else training
        conv, bn = self.decoder[l]
        return T.relu6(bn(conv(T.relu6(t)), training))

    def regression_head(self, d1: Tensor, target_h: int, target_w: int) -> Tensor:
        """conv → 入力サイズへ双線形拡大 → relu6 → /6（値域 [0, 1]）"""
        y = T.bilinear_resize(self.head(d1), target_h, target_w)
        return T.relu6(y) / 6.0

    def forward(self, img: Tensor, training: Optional[bool] = None) -> Tensor:
        training = self.training if training is None else training
        feats = self.encode(img, training)
        for l in range(self.cfg.stages, 0, -1):
            if l not in self.decoder:
                continue
            feats.D[l] = self.decode_stage(l, self.fuse(l, feats, training), training)
        return self.regression_head(feats.D[1], img.shape[2], img.shape[3])

    __call__ = forward

    def predict(self, grid: np.ndarray) -> np.ndarray:
        """推論（eval モード、テープなし）。[H, W] → [H, W]"""
        return self.forward(Tensor.from_grid(grid), training=False).data[0, 0]

    # -- パラメータ ---------------------------------------------------------

    def _batch_norms(self) -> List[BatchNorm2d]:
        bns = [bn for _, bn in self.encoder]
        bns += [b.bn for b in self.branches.values() if b.bn is not None]
        bns += [bn for _, bn in self.decoder.values()]
        return bns

    def network_parameters(self) -> List[Parameter]:
        """θ を除く学習可能パラメータ"""
        params = []
        for conv, bn in self.encoder:
            params += conv.parameters() + bn.parameters()
        for e in self.edges:
            b = self.branches[e]
            params += b.conv.parameters()
            if b.bn is not None:
                params += b.bn.parameters()
        for l in sorted(self.decoder, reverse=True):
            conv, bn = self.decoder[l]
            params += conv.parameters() + bn.parameters()
        params += self.head.parameters()
        return params

    def parameters(self) -> List[Parameter]:
        params = self.network_parameters()
        if self.connections is not None:
            params += self.connections.parameters()
        return params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        for bn in self._batch_norms():
            state.update({k: v.copy() for k, v in bn.buffers().items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ArchitectureError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
        for p in self.parameters():
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {arr.shape} does not match {p.data.shape}")
            p.data[...] = arr
        for bn in self._batch_norms():
            bn.load_buffers(state)


def build_supernet(cfg: SuperNetConfig, seed: int = 0) -> PRNet:
    """全候補接続を持つ super-PRNet"""
    net = PRNet(cfg, edges=None, weighted=True, seed=seed)
    logger.info(f"super-PRNet: L={cfg.stages}, {len(net.edges)} connections, "
                f"{net.parameter_count()} parameters")
    return net
