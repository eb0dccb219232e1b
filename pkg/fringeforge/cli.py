"""
cli.py - コマンドライン

サブコマンド:
    synth      合成データセットを生成（QPT1 + manifest.txt）
    classical  従来法パイプライン（復調 → 位相接続 → 収差補正）
    search     super-PRNet の探索と枝刈り
    train      NAS-PRNet の学習
    eval       テスト分割での評価
    infer      干渉縞画像から位相マップ（PGM）を推論
    bench      推論レイテンシ計測

終了コード: 0 成功 / 1 入力・検証エラー / 2 I/O エラー
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np

from .classical import (
    FringeSpec, Interferogram, PhaseMap,
    border_psnr, compensate, fourier_demodulate, goldstein_unwrap,
    render_interferogram, synth_phase,
)
from .config import RunConfig, load_config, read_run_file, setup_logging
from .errors import ConfigError, FringeForgeError
from .formats import (
    ensure_dir, load_checkpoint, load_grid, save_checkpoint, save_tensor, write_pgm,
)
from .harness import (
    evaluate, fringe_style, load_dataset, make_dataset, measure_latency,
    save_dataset, train, write_metrics_csv, write_summary,
)
from .losses import LossConfig
from .nas import (
    SearchSchedule, checkpoint_weights, export_architecture, full_architecture,
    load_architecture, materialize, model_from_checkpoint, network_from_meta, prune,
    save_architecture, search, write_weight_history,
)
from .supernet import REFERENCE_ENCODER_DEPTHS, SuperNetConfig


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    """使い方エラーを例外にする（終了コード 1）"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', dest='run_file', default=None, help='key = value 形式の設定ファイル')
    p.add_argument('--seed', type=int, default=argparse.SUPPRESS)
    p.add_argument('--out', default=argparse.SUPPRESS, help='出力ディレクトリ')
    p.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ERROR')


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog='fringeforge', description='NAS-generated phase retrieval for off-axis QPI')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='合成データセットを生成')
    _add_common(p)
    p.add_argument('--n', type=int, default=S)
    p.add_argument('--size', type=int, default=S)
    p.add_argument('--l-stages', dest='l_stages', type=int, default=S)
    p.add_argument('--labels', choices=['analytic', 'classical'], default=S)
    p.add_argument('--style', default=S)
    p.add_argument('--max-blobs', dest='max_blobs', type=int, default=S)

    p = sub.add_parser('classical', help='従来法による位相復元')
    _add_common(p)
    p.add_argument('input', nargs='?', default=None, help='干渉縞（.qpt または画像）')
    p.add_argument('--synthetic', action='store_true', help='合成干渉縞で往復検証')
    p.add_argument('--calibration', default=None, help='試料なし領域の干渉縞')
    p.add_argument('--compensate', action='store_true')
    p.add_argument('--no-unwrap', dest='no_unwrap', action='store_true')
    p.add_argument('--fx', type=float, default=None)
    p.add_argument('--fy', type=float, default=None)
    p.add_argument('--peak', type=float, default=None, help='合成位相の最大値（rad）')
    p.add_argument('--size', type=int, default=S)
    p.add_argument('--style', default=S)
    p.add_argument('--window-radius', dest='window_radius', type=float, default=S)

    p = sub.add_parser('search', help='super-PRNet の接続探索')
    _add_common(p)
    p.add_argument('--data', default=S)
    p.add_argument('--l-stages', dest='l_stages', type=int, default=S)
    p.add_argument('--alpha', type=float, default=S)
    p.add_argument('--beta', type=float, default=S)
    p.add_argument('--sigma', type=float, default=S)
    p.add_argument('--epochs', dest='joint_epochs', type=int, default=S)
    p.add_argument('--pretrain-epochs', dest='pretrain_epochs', type=int, default=S)
    p.add_argument('--lr', type=float, default=S)

    p = sub.add_parser('train', help='NAS-PRNet の学習')
    _add_common(p)
    p.add_argument('--data', default=S)
    p.add_argument('--arch', default=S)
    p.add_argument('--full', action='store_true', help='枝刈りなしの全接続で学習')
    p.add_argument('--l-stages', dest='l_stages', type=int, default=S)
    p.add_argument('--epochs', type=int, default=S)
    p.add_argument('--lr', type=float, default=S)
    p.add_argument('--crop', type=int, default=S)

    p = sub.add_parser('eval', help='テスト分割で評価')
    _add_common(p)
    p.add_argument('--data', default=S)
    p.add_argument('--checkpoint', default=S)

    p = sub.add_parser('infer', help='位相マップを推論')
    _add_common(p)
    p.add_argument('inputs', nargs='+')
    p.add_argument('--checkpoint', default=S)

    p = sub.add_parser('bench', help='推論レイテンシ計測')
    _add_common(p)
    p.add_argument('--checkpoint', default=S)
    p.add_argument('--size', dest='sizes', type=int, action='append', default=None)
    p.add_argument('--repeats', type=int, default=S)
    p.add_argument('--l-stages', dest='l_stages', type=int, default=S)

    return parser


_RUN_KEYS = {f for f in RunConfig.__dataclass_fields__}


def resolve_run_config(args: argparse.Namespace, yaml_cfg: Mapping) -> RunConfig:
    """config.yaml < --config ファイル < フラグ"""
    run = RunConfig.from_yaml(yaml_cfg)
    if args.run_file:
        values, lines = read_run_file(args.run_file)
        run.update(values, source=args.run_file, lines=lines)
    flags = {k: v for k, v in vars(args).items() if k in _RUN_KEYS}
    run.update(flags, source='flags')
    run.validate()
    return run


def supernet_config(run: RunConfig, yaml_cfg: Mapping, stages: Optional[int] = None,
                    size: Optional[int] = None) -> SuperNetConfig:
    section = dict(yaml_cfg.get('supernet', {}) or {})
    L = stages if stages is not None else run.l_stages
    depths = list(section.get('encoder_depths') or [])
    if len(depths) < L:
        depths += REFERENCE_ENCODER_DEPTHS[len(depths):L]
        while len(depths) < L:
            depths.append(depths[-1])
    return SuperNetConfig(
        stages=L,
        input_size=(size or run.size, size or run.size),
        encoder_depths=depths[:L],
        depth_cap=int(section.get('depth_cap', 64)),
        depth_slope=int(section.get('depth_slope', 8)),
        ground_pool=tuple(section.get('ground_pool', (3, 3))),
    )


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------

def cmd_synth(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    fr, ab = fringe_style(run.style, yaml_cfg.get('styles'))
    data = make_dataset(run.n, run.size, fr, ab, seed=run.seed, split=run.split, labels=run.labels,
                        max_blobs=run.max_blobs, phase_max=run.phase_max, style=run.style,
                        stages=run.l_stages)
    out = save_dataset(data, run.out)
    counts = {name: len(idx) for name, idx in data.splits.items()}
    print(f"dataset: {out}")
    print(f"pairs: {len(data)} ({run.size}x{run.size}), style {run.style}, labels {run.labels}")
    print(f"split: train {counts['train']}, val {counts['val']}, test {counts['test']}")
    return EXIT_OK


def _write_phase(out: Path, name: str, grid: np.ndarray, lo: float, hi: float) -> None:
    save_tensor(out / f"{name}.qpt", grid)
    if not hi > lo:
        hi = lo + 1.0
    write_pgm(out / f"{name}.pgm", grid, lo, hi, 'rad')


def cmd_classical(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    if args.synthetic == bool(args.input):
        raise ConfigError("classical needs exactly one of an input interferogram or --synthetic")
    fr_style, ab = fringe_style(run.style, yaml_cfg.get('styles'))
    carrier: Optional[FringeSpec] = None
    if args.fx is not None or args.fy is not None:
        if args.fx is None or args.fy is None:
            raise ConfigError("--fx and --fy must be given together")
        carrier = FringeSpec(carrier_fx=args.fx, carrier_fy=args.fy,
                             contrast=fr_style.contrast, background=fr_style.background)

    truth: Optional[PhaseMap] = None
    calib_ig: Optional[Interferogram] = None
    if args.synthetic:
        fr = carrier or fr_style
        truth = synth_phase(run.size, run.size, run.max_blobs, run.phase_max, seed=run.seed, peak=args.peak)
        sample_ig = render_interferogram(truth, ab, fr, seed=run.seed)
        calib_ig = render_interferogram(PhaseMap(np.zeros_like(truth.grid)), ab, fr, seed=run.seed + 1)
        carrier = fr
    else:
        sample_ig = Interferogram(load_grid(args.input))
        if args.compensate:
            calib_ig = Interferogram(load_grid(_require(args.calibration, '--calibration (with --compensate)')))
    out = ensure_dir(run.out)

    t0 = time.perf_counter()
    wrapped = fourier_demodulate(sample_ig, carrier, run.window_radius)
    calib_wrapped = fourier_demodulate(calib_ig, carrier, run.window_radius) if calib_ig else None
    t_demod = time.perf_counter() - t0
    _write_phase(out, 'wrapped', wrapped.grid, -np.pi, np.pi)
    if args.no_unwrap:
        print(f"timing: demodulate {t_demod * 1000:.1f} ms")
        return EXIT_OK

    t0 = time.perf_counter()
    unwrapped = goldstein_unwrap(wrapped)
    calib_unwrapped = goldstein_unwrap(calib_wrapped) if calib_wrapped else None
    t_unwrap = time.perf_counter() - t0
    _write_phase(out, 'unwrapped', unwrapped.grid, float(unwrapped.grid.min()), float(unwrapped.grid.max()))

    t_comp = 0.0
    if calib_unwrapped is not None:
        t0 = time.perf_counter()
        compensated = compensate(unwrapped, calib_unwrapped)
        t_comp = time.perf_counter() - t0
        _write_phase(out, 'compensated', compensated.grid, 0.0, run.phase_max)
        if truth is not None:
            print(f"round-trip PSNR: {border_psnr(compensated.grid, truth.grid, run.phase_max):.2f} dB")
    print(f"timing: demodulate {t_demod * 1000:.1f} ms, unwrap {t_unwrap * 1000:.1f} ms, "
          f"compensate {t_comp * 1000:.1f} ms")
    return EXIT_OK


def cmd_search(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    data = load_dataset(_require(run.data, '--data'))
    cfg = supernet_config(run, yaml_cfg, size=data.size)
    sched = SearchSchedule(pretrain_epochs=run.pretrain_epochs, joint_epochs=run.joint_epochs,
                           learning_rate=run.lr)
    loss_cfg = LossConfig(alpha=run.alpha, beta=run.beta, mixge_lambda=run.mixge_lambda,
                          clamp_eps=run.clamp_eps)
    result = search(cfg, data, sched, loss_cfg, seed=run.seed, sigma=run.sigma)

    out = ensure_dir(run.out)
    save_checkpoint(out / 'supernet.ckpt', result.checkpoint)
    write_weight_history(result.weight_history, out / 'weight_history.csv')
    write_metrics_csv(result.history, out / 'search_metrics.csv')

    weights = checkpoint_weights(result.checkpoint, cfg.stages)
    arch = prune(weights, run.sigma, cfg.stages, source='supernet.ckpt')
    save_architecture(arch, out / 'architecture.txt')
    print(f"best epoch: {result.checkpoint.epoch}, val PSNR: {_db(result.checkpoint.val_psnr)}")
    print(f"connections kept: {len(arch.kept_edges)}/{len(weights)}, stages {arch.kept_stages}")
    return EXIT_OK


def cmd_train(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    data = load_dataset(_require(run.data, '--data'))
    if args.full:
        arch = full_architecture(run.l_stages)
    else:
        arch = load_architecture(_require(run.arch, '--arch (or --full)'))
    cfg = supernet_config(run, yaml_cfg, stages=arch.stages, size=data.size)
    net = materialize(arch, cfg, seed=run.seed)
    meta = {'kind': 'nasprnet', 'config': cfg.to_dict(), 'architecture': export_architecture(arch),
            'phase_max': float(run.phase_max), 'seed': int(run.seed)}
    best, history = train(net, data, run.epochs, run.lr, seed=run.seed, crop=run.crop,
                          mixge_lambda=run.mixge_lambda, meta=meta)

    out = ensure_dir(run.out)
    save_checkpoint(out / 'nasprnet.ckpt', best)
    write_metrics_csv(history, out / 'train_metrics.csv')
    print(f"parameters: {net.parameter_count()}")
    print(f"best epoch: {best.epoch}, val PSNR: {_db(best.val_psnr)}")
    return EXIT_OK


def _checkpoint_path(run: RunConfig, default_name: str) -> Path:
    return Path(run.checkpoint) if run.checkpoint else Path(run.out) / default_name


def cmd_eval(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    data = load_dataset(_require(run.data, '--data'))
    ckpt = load_checkpoint(_checkpoint_path(run, 'nasprnet.ckpt'))
    net = model_from_checkpoint(ckpt)
    metrics = evaluate(net, data, latency_repeats=run.repeats)

    # 同じ構成・シードの未学習ネットワーク
    untrained = evaluate(network_from_meta(ckpt.meta), data)

    out = ensure_dir(run.out)
    row = {'split': 'test', 'pairs': len(data.splits['test']), 'psnr_db': metrics.psnr_db,
           'mixge': metrics.mixge, 'untrained_psnr_db': untrained.psnr_db}
    write_metrics_csv([row], out / 'eval_metrics.csv')
    write_summary({**row, 'latency_ms': metrics.latency_ms, 'parameter_count': net.parameter_count(),
                   'checkpoint_epoch': ckpt.epoch}, out / 'summary.txt')
    print(f"test PSNR: {metrics.psnr_db:.2f} dB (untrained {untrained.psnr_db:.2f} dB), "
          f"mixge {metrics.mixge:.6f}, latency {metrics.latency_ms:.2f} ms")
    return EXIT_OK


def cmd_infer(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    ckpt = load_checkpoint(_checkpoint_path(run, 'nasprnet.ckpt'))
    net = model_from_checkpoint(ckpt).eval()
    phase_max = float(ckpt.meta.get('phase_max', run.phase_max))
    out = ensure_dir(run.out)
    for path in args.inputs:
        grid = load_grid(path)
        phase = net.predict(grid) * phase_max
        target = out / f"{Path(path).stem}_phase.pgm"
        write_pgm(target, phase, 0.0, phase_max, 'rad')
        print(f"{path} -> {target}")
    return EXIT_OK


def cmd_bench(args, run: RunConfig, yaml_cfg: Mapping) -> int:
    if run.checkpoint:
        net = model_from_checkpoint(load_checkpoint(run.checkpoint))
    else:
        cfg = supernet_config(run, yaml_cfg)
        net = materialize(full_architecture(cfg.stages), cfg, seed=run.seed)
    sizes = args.sizes or list((yaml_cfg.get('bench', {}) or {}).get('sizes', [run.size]))
    report: Dict[str, object] = {'parameter_count': net.parameter_count(), 'repeats': run.repeats}
    for size in sizes:
        latency = measure_latency(net, int(size), run.repeats, seed=run.seed)
        report[f"latency_ms_{size}"] = latency
        print(f"{size}x{size}: {latency:.2f} ms (median of {run.repeats})")
    out = ensure_dir(run.out)
    write_summary(report, out / 'latency.txt')
    print(f"parameters: {net.parameter_count()}")
    return EXIT_OK


def _db(value: Optional[float]) -> str:
    return 'n/a' if value is None else f"{value:.2f} dB"


COMMANDS = {
    'synth': cmd_synth,
    'classical': cmd_classical,
    'search': cmd_search,
    'train': cmd_train,
    'eval': cmd_eval,
    'infer': cmd_infer,
    'bench': cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    エントリポイント

    Returns:
        終了コード（0 成功 / 1 入力・検証エラー / 2 I/O エラー）
    """
    try:
        args = build_parser().parse_args(argv)
        yaml_cfg = load_config()
        log_section = dict(yaml_cfg.get('logging', {}) or {})
        if args.log_level:
            log_section['level'] = args.log_level
        setup_logging(log_section)
        run = resolve_run_config(args, yaml_cfg)
        return COMMANDS[args.command](args, run, yaml_cfg)
    except (FringeForgeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
