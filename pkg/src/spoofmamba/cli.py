"""``spoofmamba`` command line: train, score, eval, gradcheck, bench, inspect, paramcount.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .evalmetrics import CostModel, format_report, metrics_report, write_det_csv
from .model import BONAFIDE, SPOOF, ModelConfig, SpoofMamba, score
from .numerics import NonFiniteError, no_grad

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("spoofmamba")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _audio_path(audio_dir: Path, utt_id: str) -> Path:
    path = audio_dir / f"{utt_id}.wav"
    if not path.exists():
        raise FileNotFoundError(f"missing audio for {utt_id}: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import train_loop

    cfg = io.load_model_config(args.config)
    settings = io.load_train_settings(args.config)
    if args.seed is not None:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    epochs = args.epochs if args.epochs is not None else int(settings.get("epochs", 1))
    entries = io.parse_protocol(args.protocol)
    if not entries:
        raise ValueError(f"{args.protocol}: empty protocol")
    audio_dir = Path(args.audio_dir)
    waves = [io.read_wav(_audio_path(audio_dir, e.utt_id)) for e in entries]
    labels = np.array([BONAFIDE if e.key == "bonafide" else SPOOF for e in entries])
    log_path = Path(str(args.out) + ".log")
    with open(log_path, "w") as log_file:
        result = train_loop(waves, labels, cfg, epochs=epochs,
                            batch_size=int(settings.get("batch_size", 32)),
                            lr=float(settings.get("lr", 5e-4)),
                            weight_decay=float(settings.get("weight_decay", 1e-4)),
                            max_steps=args.max_steps, log_file=log_file)
    io.save_checkpoint(args.out, result.model, result.optimizer, epoch=epochs - 1)
    print(f"trained {len(result.history)} steps, final loss {result.history[-1].loss:.6f}, wrote {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    model, _ = io.load_checkpoint(args.ckpt)
    model.eval()
    entries = io.parse_protocol(args.protocol)
    audio_dir = Path(args.audio_dir)
    records = []
    with no_grad():
        for e in entries:
            wave = io.load_wav(_audio_path(audio_dir, e.utt_id), model.cfg.num_samples)
            records.append((e.utt_id, float(score(model, wave)[0])))
    io.write_scores(args.out, records)
    print(f"scored {len(records)} utterances, wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scores = io.read_scores(args.scores)
    records = io.join_scores(scores, io.parse_protocol(args.protocol))
    cost = io.load_cost_model(args.cost_config) if args.cost_config else CostModel()
    print(format_report(metrics_report(records, cost)))
    if args.det_csv:
        write_det_csv(args.det_csv, records)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    t0 = time.perf_counter()
    ok = run_suite(seed=args.seed)
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args) -> int:
    from . import kernels
    from .ssm import selective_scan_chunked, selective_scan_ref

    backend = kernels.get_backend(args.backend) if args.backend else None
    rng = np.random.default_rng(0)
    L, D, N = args.len, args.dim, args.state
    u = rng.standard_normal((L, D))
    delta = rng.uniform(1e-3, 1e-1, (L, D))
    A = -rng.uniform(0.5, 4.0, (D, N))
    B = rng.standard_normal((L, N))
    C = rng.standard_normal((L, N))
    d = rng.standard_normal(D)
    if args.scan == "ref":
        def run():
            return selective_scan_ref(u, delta, B, C, A, d, backend=backend)
    else:
        def run():
            return selective_scan_chunked(u, delta, B, C, A, d, args.chunk, backend=backend)
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    best = min(times)
    name = args.backend or kernels.BACKEND
    print(f"scan={args.scan} backend={name} L={L} D={D} N={N} best={best * 1e3:.3f} ms "
          f"throughput={L / best:.0f} steps/s")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, _ = io.load_checkpoint(args.ckpt)
    model.eval()
    if model.attmap is None:
        raise UsageError("checkpoint has the 2-D attention map disabled")
    from .attmap import attention_weights

    wave = io.load_wav(args.wav, model.cfg.num_samples)
    with no_grad():
        amap = attention_weights(model.attmap.logits(model.encoder(wave)), model.cfg.joint_softmax_attmap)
    logits, m_spec, m_temp = amap.logits.data[0], amap.m_spec.data[0], amap.m_temp.data[0]
    with open(args.dump_attmap, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["f", "t", "logit", "m_spec", "m_temp"])
        for f in range(logits.shape[0]):
            for t in range(logits.shape[1]):
                writer.writerow([f, t, repr(float(logits[f, t])), repr(float(m_spec[f, t])),
                                 repr(float(m_temp[f, t]))])
    print(f"attention map {logits.shape[0]}x{logits.shape[1]} written to {args.dump_attmap}")
    return EXIT_OK


def cmd_paramcount(args) -> int:
    cfg = io.load_model_config(args.config) if args.config else ModelConfig()
    model = SpoofMamba(cfg)
    census: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        census[top] = census.get(top, 0) + p.size
    for top, n in census.items():
        print(f"{top} {n}")
    print(f"mamba_blocks {model.mamba_block_count}")
    print(f"total {model.num_parameters()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spoofmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a protocol and audio directory")
    p.add_argument("--config", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score every protocol utterance with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER, minDCF and (with ASV rates) min t-DCF")
    p.add_argument("--scores", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--cost-config")
    p.add_argument("--det-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="selective-scan throughput")
    p.add_argument("--scan", choices=["ref", "chunked"], required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--backend", choices=["compiled", "python"])
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="dump the 2-D attention map of one clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--dump-attmap", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("paramcount", help="parameter census per module")
    p.add_argument("--config")
    p.set_defaults(func=cmd_paramcount)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"spoofmamba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spoofmamba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"spoofmamba: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"spoofmamba: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
