"""Command-line entry point: train, analyze-spectra, attack-eval, verify, bench.

Exit codes: 0 success, 1 a check or run failed, 2 usage or config error,
3 unreadable input file.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as C
from .attacks import AttackConfig
from .data import DataFormatError, Dataset, load_idx_like, parse_images, synth_generate
from .lipschitz import head_report, reports_to_csv, reports_to_text
from .model import (CheckpointError, VitConfig, extract_attention_weights, init_params, load_checkpoint,
                    save_checkpoint, vit_forward)
from .msvp import MsvpConfig
from .trainer import NonFiniteLossError, TrainConfig, evaluate, train
from .verify import UsageError, format_table, run_suites


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _datasets(values: dict, model_cfg: VitConfig, seed: int):
    if values["data.source"] == "synthetic":
        kw = dict(classes=model_cfg.classes, image_size=model_cfg.image_size, seed=seed,
                  channels=model_cfg.channels, noise_std=values["data.noise_std"])
        train_set = synth_generate(per_class=values["data.per_class"], split="train", **kw)
        test_set = synth_generate(per_class=values["data.test_per_class"], split="test", **kw)
        return train_set, test_set
    train_set = load_idx_like(values["data.train_images"], values["data.train_labels"], model_cfg.classes)
    test_set = train_set
    if values["data.test_images"]:
        test_set = load_idx_like(values["data.test_images"], values["data.test_labels"], model_cfg.classes)
    return train_set, test_set


def cmd_train(args, overrides) -> int:
    run = C.load(args.config, overrides)
    out = run.output_dir
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.resolved"), C.echo(run.values))
    train_set, test_set = _datasets(run.values, run.model, run.seed)
    params = init_params(run.model, seed=run.seed)
    try:
        result = train(params, train_set, run.train, eval_data=test_set)
    except NonFiniteLossError as exc:
        _write(os.path.join(out, "nonfinite_dump.txt"), exc.dump())
        np.save(os.path.join(out, "nonfinite_batch.npy"), exc.images)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    data_meta = {k: run.values[k] for k in C.SCHEMA if k.startswith("data.")}
    save_checkpoint(os.path.join(out, "checkpoint.bin"), result.params, {"seed": run.seed, "data": data_meta})
    _write(os.path.join(out, "metrics.csv"), result.metrics.to_csv())
    _write(os.path.join(out, "timing.csv"), result.metrics.timing_csv())
    _write(os.path.join(out, "summary.txt"), result.metrics.summary())
    sys.stdout.write(result.metrics.summary())
    return 0


def _load(path):
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}", 3)
    return load_checkpoint(path)


def _anchor_inputs(params, images) -> dict:
    trace: dict = {}
    vit_forward(params, images, trace=trace)
    return trace


def cmd_analyze_spectra(args, overrides) -> int:
    params, _ = _load(args.checkpoint)
    cfg = params.config
    n = args.tokens if args.tokens is not None else cfg.n_tokens
    anchors = None
    if args.anchor_images:
        data = load_idx_like(args.anchor_images, args.anchor_labels) if args.anchor_labels else None
        images = data.images if data is not None else _images_only(args.anchor_images)
        anchors = _anchor_inputs(params, images[: args.anchor_count])
        n = cfg.n_tokens
    reports = []
    for view in extract_attention_weights(params):
        w = params.attention(view.layer)
        X0, B = None, args.B
        if anchors is not None:
            Xs = anchors[f"blocks.{view.layer}.attn."]
            X0 = Xs[0]
            if B is None:
                B = float(np.max(np.sqrt(np.sum(Xs ** 2, axis=(1, 2)))))
        if B is None:
            raise CliError("--B is required without --anchor-images")
        reports.append(head_report(w, view.layer, view.head, n, B, args.delta0, X0,
                                   args.samples if X0 is not None else 0, args.seed))
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "spectra.csv"), reports_to_csv(reports))
    _write(os.path.join(args.out, "spectra.txt"), reports_to_text(reports))
    sys.stdout.write(reports_to_text(reports))
    return 0


def _images_only(path):
    with open(path, "rb") as fh:
        return parse_images(fh.read())


def _eval_data(args, params, extra) -> Dataset:
    cfg = params.config
    if args.images:
        if not args.labels:
            raise CliError("--labels is required with --images")
        return load_idx_like(args.images, args.labels, cfg.classes)
    meta = extra.get("data", {})
    if meta.get("data.source", "synthetic") != "synthetic":
        raise CliError("checkpoint was trained on files; pass --images/--labels")
    seed = extra.get("seed", 0) if args.data_seed is None else args.data_seed
    per_class = args.per_class if args.per_class is not None else meta.get("data.test_per_class", 20)
    return synth_generate(cfg.classes, per_class, cfg.image_size, seed, cfg.channels,
                          meta.get("data.noise_std", 0.1), split="test")


def cmd_attack_eval(args, overrides) -> int:
    params, extra = _load(args.checkpoint)
    data = _eval_data(args, params, extra)
    try:
        attacks = C.parse_attack_list(args.attacks)
    except C.ConfigError as exc:
        raise CliError(str(exc)) from None
    rows = ["attack,epsilon,steps,accuracy", f"clean,0.0,0,{evaluate(params, data)!r}"]
    for a in attacks:
        acc = evaluate(params, data, a, seed=args.seed)
        rows.append(f"{a.name},{a.epsilon!r},{a.steps if a.family == 'pgd' else 1},{acc!r}")
    text = "\n".join(rows) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_verify(args, overrides) -> int:
    names = None if args.suites is None else [s for s in args.suites.split(",") if s.strip()]
    try:
        results = run_suites(names)
    except UsageError as exc:
        raise CliError(str(exc)) from None
    table = format_table(results)
    if args.out:
        _write(args.out, table)
    sys.stdout.write(table)
    return 0 if all(r.passed for r in results) else 1


def bench(steps: int = 10, repeats: int = 5, seed: int = 0, model_cfg: VitConfig | None = None,
          batch_size: int = 50, modes=("standard", "adversarial")) -> list[dict]:
    """Seconds for ``steps`` training steps with the penalty off and on.

    Off/on runs are interleaved and each configuration keeps its fastest
    repeat, which suppresses scheduler noise on a shared machine.
    """
    model_cfg = model_cfg or VitConfig()
    per_class = -(-steps * batch_size // model_cfg.classes)
    data = synth_generate(model_cfg.classes, per_class, model_cfg.image_size, seed, model_cfg.channels)
    params = init_params(model_cfg, seed=seed)
    rows = []
    for mode in modes:
        atk = AttackConfig("pgd", 8 / 255, steps=2) if mode == "adversarial" else None
        best = {False: float("inf"), True: float("inf")}
        for _ in range(repeats):
            for on in (False, True):
                cfg = TrainConfig(mode, 1, batch_size, 0.1, 1e-4, 0.9,
                                  MsvpConfig(enabled=on), atk, (), seed)
                res = train(params, data, cfg, max_steps=steps)
                best[on] = min(best[on], float(sum(res.metrics.step_seconds)))
        for on in (False, True):
            rows.append({"mode": mode, "msvp": on, "seconds": best[on], "ratio": best[on] / best[False]})
    return rows


def cmd_bench(args, overrides) -> int:
    rows = bench(args.steps, args.repeats, args.seed)
    text = "mode,msvp,seconds,ratio\n" + "".join(
        f"{r['mode']},{'on' if r['msvp'] else 'off'},{r['seconds']:.6f},{r['ratio']:.4f}\n" for r in rows)
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specguard", allow_abbrev=False,
                                description="Spectral-penalty attention training and analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False,
                       help="train a model; extra --section.key value flags override the config")
    t.add_argument("--config", help="flat key-path config file")
    t.set_defaults(func=cmd_train, overrides=True)

    a = sub.add_parser("analyze-spectra", allow_abbrev=False, help="per-head singular values and bounds")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--tokens", type=int, help="token count N (default: the model's)")
    a.add_argument("--B", type=float, help="input norm bound (default: max over anchor inputs)")
    a.add_argument("--delta0", type=float, default=0.0)
    a.add_argument("--anchor-images", help="image file whose attention inputs anchor the bound")
    a.add_argument("--anchor-labels")
    a.add_argument("--anchor-count", type=int, default=64)
    a.add_argument("--samples", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=".")
    a.set_defaults(func=cmd_analyze_spectra)

    e = sub.add_parser("attack-eval", allow_abbrev=False, help="clean and robust accuracy table")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--attacks", default="fgsm@2/255,pgd2@2/255,pgd20@2/255",
                   help="comma list of name@epsilon, e.g. fgsm@2/255,pgd20@8/255")
    e.add_argument("--images")
    e.add_argument("--labels")
    e.add_argument("--per-class", type=int)
    e.add_argument("--data-seed", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_attack_eval)

    v = sub.add_parser("verify", allow_abbrev=False, help="run the oracle suites")
    v.add_argument("--suites", help="comma list (default: all)")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", allow_abbrev=False, help="relative step time with the penalty on")
    b.add_argument("--steps", type=int, default=10)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and not getattr(args, "overrides", False):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (CheckpointError, DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
