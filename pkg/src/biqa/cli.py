"""Batch command-line interface.

Subcommands: train, predict, eval, xdomain, weak, active. All outputs are
JSON with a versioned "schema" field; every subcommand is deterministic given
its full flag set (timing fields are opt-in via --timing).
"""

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datasets, metrics, pipeline, rft
from .datasets import select_records
from .distortion import parse_merge_map
from .errors import BiqaError, ConfigurationError
from .images import decode


def _emit(obj, out_path):
    text = json.dumps(obj, sort_keys=True)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _emit_lines(lines, out_path):
    text = "\n".join(json.dumps(obj, sort_keys=True) for obj in lines)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _config(args) -> pipeline.PipelineConfig:
    crop = pipeline.default_crop(args.scenario)
    if args.crop_train is not None:
        crop.train_count = args.crop_train
    if args.crop_test is not None:
        crop.test_count = args.crop_test
    if args.crop_side is not None:
        crop.side = args.crop_side
    merge = parse_merge_map(args.merge_map) if getattr(args, "merge_map", None) else None
    return pipeline.PipelineConfig(scenario=args.scenario, crop=crop, merge_map=merge)


def _split_train_test(records, scenario, seed):
    policy = "by_reference" if scenario == "synthetic" else "by_image"
    plan = datasets.split(records, (0.8, 0.0, 0.2), policy, seed)
    return select_records(records, plan.train), select_records(records, plan.test)


def _predict_records(model, records, batch_images=64):
    preds = []
    for i in range(0, len(records), batch_images):
        chunk = records[i : i + batch_images]
        images = []
        for rec in chunk:
            img = decode(rec.image_path, source_id=rec.image_id)
            img.mos = rec.mos
            images.append(img)
        preds.extend(pipeline.predict_batch(model, images))
    return preds


def _run_once(records, cfg, run_seed, fraction=None, dump_rft=None):
    """One split/train/evaluate cycle; optionally on a training subsample."""
    train_recs, test_recs = _split_train_test(records, cfg.scenario, run_seed)
    if fraction is not None and fraction < 1.0:
        rng = np.random.default_rng(pipeline._derived_seed(run_seed, 7))
        keep = np.sort(rng.permutation(len(train_recs))[: max(1, int(len(train_recs) * fraction))])
        train_recs = [train_recs[i] for i in keep]
    diagnostics = {} if dump_rft else None
    model = pipeline.train(train_recs, cfg, run_seed, diagnostics=diagnostics)
    if dump_rft:
        rft.write_cost_curve(diagnostics["rft_spatial"], f"{dump_rft}_spatial.csv")
        if "rft_spatiocolor" in diagnostics:
            rft.write_cost_curve(diagnostics["rft_spatiocolor"], f"{dump_rft}_spatiocolor.csv")
    preds = _predict_records(model, test_recs)
    pred_scores = [p.mos_pred for p in preds]
    truth = [r.mos for r in test_recs]
    run = {
        "seed": run_seed,
        "n_test": len(test_recs),
        "plcc": metrics.plcc(pred_scores, truth),
        "srocc": metrics.srocc(pred_scores, truth),
        "router_accuracy": None,
    }
    if cfg.scenario == "synthetic":
        true_groups = [model.router.merged_label(r.distortion_type) for r in test_recs]
        hits = [int(p.group == g) for p, g in zip(preds, true_groups)]
        run["router_accuracy"] = float(np.mean(hits))
    return run


def cmd_train(args):
    cfg = _config(args)
    records = datasets.load_manifest(args.manifest, args.images_dir, args.scenario)
    diagnostics = {} if args.dump_rft else None
    model = pipeline.train(records, cfg, args.seed, diagnostics=diagnostics)
    if args.dump_rft:
        rft.write_cost_curve(diagnostics["rft_spatial"], f"{args.dump_rft}_spatial.csv")
        if "rft_spatiocolor" in diagnostics:
            rft.write_cost_curve(diagnostics["rft_spatiocolor"], f"{args.dump_rft}_spatiocolor.csv")
    pipeline.save(model, args.model)
    _emit(
        {
            "schema": "biqa-train/1",
            "scenario": args.scenario,
            "images": len(records),
            "model": str(args.model),
            "groups": model.router.k,
        },
        args.out,
    )
    return 0


def cmd_predict(args):
    model = pipeline.load(args.model)
    records = datasets.load_manifest(args.manifest, args.images_dir, "authentic")
    t0 = time.perf_counter()
    preds = _predict_records(model, records, args.batch_images)
    elapsed = time.perf_counter() - t0
    lines = [
        {
            "schema": "biqa-pred/1",
            "image": p.image_id,
            "mos_pred": p.mos_pred,
            "per_sub_scores": [float(s) for s in p.per_sub_scores],
            "group": p.group,
        }
        for p in preds
    ]
    if args.timing:
        lines.append(
            {
                "schema": "biqa-predict-summary/1",
                "images": len(preds),
                "seconds": elapsed,
                "images_per_sec": len(preds) / elapsed if elapsed > 0 else float("inf"),
            }
        )
    _emit_lines(lines, args.out)
    return 0


def _eval_runs(records, cfg, seed, repeats, parallel, dump_rft=None):
    seeds = [seed + i for i in range(repeats)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_run_once, records, cfg, s) for s in seeds]
            return [f.result() for f in futures]
    return [_run_once(records, cfg, s, dump_rft=dump_rft if i == 0 else None) for i, s in enumerate(seeds)]


def cmd_eval(args):
    cfg = _config(args)
    records = datasets.load_manifest(args.manifest, args.images_dir, args.scenario)
    runs = _eval_runs(records, cfg, args.seed, args.repeats, args.parallel_runs, args.dump_rft)
    report = {
        "schema": "biqa-eval/1",
        "scenario": args.scenario,
        "repeats": args.repeats,
        "plcc": float(np.median([r["plcc"] for r in runs])),
        "srocc": float(np.median([r["srocc"] for r in runs])),
        "router_accuracy": (
            float(np.median([r["router_accuracy"] for r in runs]))
            if runs[0]["router_accuracy"] is not None
            else None
        ),
        "runs": runs,
    }
    _emit(report, args.out)
    return 0


def cmd_xdomain(args):
    cfg = _config(args)
    train_records = datasets.load_manifest(args.manifest, args.images_dir, args.scenario)
    test_records = datasets.load_manifest(args.test_manifest, args.test_images_dir, args.scenario)
    if str(args.manifest) == str(args.test_manifest):
        print("warning: train and test manifests are identical", file=sys.stderr)
    runs = []
    for i in range(args.repeats):
        run_seed = args.seed + i
        model = pipeline.train(train_records, cfg, run_seed)
        preds = _predict_records(model, test_records)
        pred_scores = [p.mos_pred for p in preds]
        truth = [r.mos for r in test_records]
        runs.append(
            {
                "seed": run_seed,
                "plcc": metrics.plcc(pred_scores, truth),
                "srocc": metrics.srocc(pred_scores, truth),
            }
        )
    _emit(
        {
            "schema": "biqa-xdomain/1",
            "scenario": args.scenario,
            "train_manifest": str(args.manifest),
            "test_manifest": str(args.test_manifest),
            "plcc": float(np.median([r["plcc"] for r in runs])),
            "srocc": float(np.median([r["srocc"] for r in runs])),
            "runs": runs,
        },
        args.out,
    )
    return 0


def cmd_weak(args):
    cfg = _config(args)
    records = datasets.load_manifest(args.manifest, args.images_dir, args.scenario)
    n_train_estimate = len(records) - int(len(records) * 0.2)
    rows = []
    for fraction in args.fractions:
        if not 0 < fraction <= 1:
            raise ConfigurationError(f"fractions must be in (0, 1], got {fraction}")
        if int(n_train_estimate * fraction) < 10:
            print(f"warning: fraction {fraction} yields fewer than 10 images, skipped", file=sys.stderr)
            continue
        runs = [_run_once(records, cfg, args.seed + i, fraction=fraction) for i in range(args.repeats)]
        rows.append(
            {
                "fraction": fraction,
                "plcc_mean": float(np.mean([r["plcc"] for r in runs])),
                "plcc_std": float(np.std([r["plcc"] for r in runs])),
                "srocc_mean": float(np.mean([r["srocc"] for r in runs])),
                "srocc_std": float(np.std([r["srocc"] for r in runs])),
                "runs": runs,
            }
        )
    _emit({"schema": "biqa-weak/1", "scenario": args.scenario, "fractions": rows}, args.out)
    return 0


def _uncertainty_rank(model, records):
    """Pool images ranked by descending std of their per-sub predictions."""
    preds = _predict_records(model, records)
    stds = np.array([float(np.std(p.per_sub_scores)) for p in preds])
    order = np.lexsort((np.arange(len(records)), -stds))
    return order


def cmd_active(args):
    cfg = _config(args)
    records = datasets.load_manifest(args.manifest, args.images_dir, args.scenario)
    pool, test_recs = _split_train_test(records, cfg.scenario, args.seed)
    pool = sorted(pool, key=lambda r: r.image_id)
    n = len(pool)
    truth = [r.mos for r in test_recs]

    def evaluate(train_subset):
        model = pipeline.train(train_subset, cfg, args.seed)
        preds = _predict_records(model, test_recs)
        scores = [p.mos_pred for p in preds]
        return model, metrics.plcc(scores, truth), metrics.srocc(scores, truth)

    init_rng = np.random.default_rng(pipeline._derived_seed(args.seed, 11))
    n_init = min(n, max(1, int(round(args.al_initial * n))))
    initial = np.sort(init_rng.permutation(n)[:n_init])

    steps_out = []
    for label, selector in (("active", "uncertainty"), ("random", "random")):
        labeled = set(initial.tolist())
        rows = []
        for step in range(args.al_steps + 1):
            subset = [pool[i] for i in sorted(labeled)]
            model, run_plcc, run_srocc = evaluate(subset)
            rows.append(
                {
                    "step": step,
                    "n_images": len(subset),
                    "fraction": len(subset) / n,
                    "plcc": run_plcc,
                    "srocc": run_srocc,
                }
            )
            if step == args.al_steps:
                break
            target = min(n, int(round((args.al_initial + (step + 1) * args.al_step) * n)))
            need = target - len(labeled)
            remaining = [i for i in range(n) if i not in labeled]
            if need <= 0:
                continue
            if not remaining:
                break  # pool exhausted
            if selector == "uncertainty":
                order = _uncertainty_rank(model, [pool[i] for i in remaining])
                chosen = [remaining[int(j)] for j in order[:need]]
            else:
                step_rng = np.random.default_rng(pipeline._derived_seed(args.seed, 20 + step))
                chosen = [remaining[int(j)] for j in np.sort(step_rng.permutation(len(remaining))[:need])]
            labeled.update(chosen)
        steps_out.append({"policy": label, "steps": rows})
    _emit(
        {
            "schema": "biqa-active/1",
            "scenario": args.scenario,
            "pool_images": n,
            "initial_fraction": args.al_initial,
            "step_fraction": args.al_step,
            "policies": steps_out,
        },
        args.out,
    )
    return 0


def _add_common(p, scenario=True):
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--images-dir", required=True, help="directory the manifest paths are relative to")
    if scenario:
        p.add_argument("--scenario", required=True, choices=["synthetic", "authentic"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.add_argument("--crop-train", type=int, default=None, metavar="N")
    p.add_argument("--crop-test", type=int, default=None, metavar="N")
    p.add_argument("--crop-side", type=int, default=None, metavar="S")
    p.add_argument("--merge-map", default=None, help="raw_type_id=group_id text file")
    p.add_argument("--dump-rft", default=None, help="prefix for RFT cost-curve CSVs")


def build_parser():
    parser = argparse.ArgumentParser(prog="biqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a full manifest and save the model")
    _add_common(p)
    p.add_argument("--model", required=True, help="output model path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score images with a trained model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--batch-images", type=int, default=64)
    p.add_argument("--timing", action="store_true", help="append a timing summary line")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="repeated split/train/test evaluation")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--parallel-runs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xdomain", help="train on one manifest, test on another")
    _add_common(p)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--test-images-dir", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_xdomain)

    p = sub.add_parser("weak", help="weak-supervision sweep over training fractions")
    _add_common(p)
    p.add_argument("--fractions", type=lambda s: [float(x) for x in s.split(",")], default=[0.1, 0.5, 1.0])
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_weak)

    p = sub.add_parser("active", help="uncertainty-driven active learning loop")
    _add_common(p)
    p.add_argument("--al-initial", type=float, default=0.1)
    p.add_argument("--al-step", type=float, default=0.1)
    p.add_argument("--al-steps", type=int, default=8)
    p.set_defaults(func=cmd_active)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BiqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
