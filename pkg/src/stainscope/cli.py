"""Command-line interface wiring the whole pipeline together.

Exit codes: 0 success, 1 usage error, 2 data/input error, 3 numeric error.
Log verbosity comes from the ``STAINSCOPE_LOG`` environment variable
(``error``, ``warn``, ``info`` or ``debug``); everything else is flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .ae.gradcheck import OPERATOR_KINDS, check_operator
from .ae.serialize import load_model, save_model
from .ae.train import train_autoencoder
from .calibration import (
    PatientRecord,
    crossval,
    optimal_cutpoint,
    roc_curve,
    roc_sample_size,
    slide_probability_from_scores,
)
from .colornorm import normalize_staining
from .config import RunConfig, load_config
from .detector import (
    Thresholds,
    baseline_red_fraction,
    score_patches,
    score_slide,
)
from .errors import (
    ConfigError,
    DegenerateLabelsError,
    EmptySlideError,
    InvalidInputError,
    StainscopeError,
)
from .imaging import (
    PATCH_SIZE,
    Patch,
    extract_border_patches,
    load_image,
    morphological_gradient,
    patch_filename,
    random_border_crops,
    save_image,
    tissue_mask,
)
from .manifest import Manifest, PatchRecord, SlideRecord, load_manifest
from .reports import write_reports
from .synth import SynthSpec, gen_dataset

log = logging.getLogger("stainscope.cli")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    name = os.environ.get("STAINSCOPE_LOG", "warn").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if name not in _LOG_LEVELS:
        log.warning("unknown STAINSCOPE_LOG value %r, using 'warn'", name)


def _run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    return load_config(getattr(args, "config", None), overrides)


def _ordered_map(fn, items, jobs: int):
    """Apply ``fn`` to items, optionally threaded; results keep item order."""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _segment_border(img, config: RunConfig):
    mask = tissue_mask(img, min_area=config.min_tissue_area)
    return morphological_gradient(mask, se_radius=config.se_radius)


def _slide_patches(manifest: Manifest, slide: SlideRecord, config: RunConfig) -> list[Patch]:
    """Border patches of a slide: recorded crops if present, else extracted."""
    if slide.patches:
        out = []
        for rec in slide.patches:
            img = load_image(manifest.resolve(rec.patch_path))
            if img.shape[:2] != (PATCH_SIZE, PATCH_SIZE):
                raise InvalidInputError(
                    f"patch {rec.patch_path!r} is {img.shape[1]}x{img.shape[0]}, "
                    f"expected {PATCH_SIZE}x{PATCH_SIZE}"
                )
            half = PATCH_SIZE // 2
            center = (rec.origin[0] + half, rec.origin[1] + half)
            out.append(Patch(slide.slide_id, rec.origin, center, img))
        return out
    img = load_image(manifest.resolve(slide.image_path))
    border = _segment_border(img, config)
    return extract_border_patches(img, border, slide.slide_id, stride=config.stride)


# ---------------------------------------------------------------- commands


def cmd_extract(args) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest, check_paths=False)
    manifest.validate(check_paths=False)
    out_dir = Path(args.out_dir) if args.out_dir else manifest.root / "patches"
    if manifest.slides:
        out_dir.mkdir(parents=True, exist_ok=True)
    failed = []
    total = 0
    for slide in manifest.slides:
        try:
            img = load_image(manifest.resolve(slide.image_path))
            border = _segment_border(img, config)
            patches = extract_border_patches(img, border, slide.slide_id, stride=config.stride)
        except (StainscopeError, OSError) as exc:
            log.error("slide %s failed: %s", slide.slide_id, exc)
            failed.append(slide.slide_id)
            continue
        labels = {tuple(p.origin): p.label for p in slide.patches}
        records = []
        for p in patches:
            path = out_dir / patch_filename(p.slide_id, p.origin)
            save_image(path, p.image)
            records.append(
                PatchRecord(
                    patch_path=os.path.relpath(path, manifest.root),
                    origin=p.origin,
                    label=labels.get(tuple(p.origin), "unlabeled"),
                )
            )
        slide.patches = records
        total += len(records)
        log.info("slide %s: %d patches", slide.slide_id, len(records))
    manifest.save(Path(args.manifest))
    print(f"extracted {total} patches from {len(manifest.slides) - len(failed)} slides")
    if failed:
        print(f"failed slides: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest)
    healthy = manifest.slides_in(split="train", diagnosis="negative")
    if not healthy:
        raise ConfigError("manifest has no negative-diagnosis slides in the train split")

    def crops(item):
        idx, slide = item
        img = load_image(manifest.resolve(slide.image_path))
        border = _segment_border(img, config)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, idx]))
        return random_border_crops(img, border, slide.slide_id, config.crops_per_slide, rng)

    patch_lists = _ordered_map(crops, list(enumerate(healthy)), config.jobs)
    patches = [p for lst in patch_lists for p in lst]
    log.info(
        "%d healthy slides x %d crops: %d training windows",
        len(healthy), config.crops_per_slide, len(patches),
    )
    print(f"training windows: {len(patches)}")

    model, tlog = train_autoencoder([p.image for p in patches], config.train_config())
    model_path = Path(args.model)
    if model_path.parent != Path(""):
        model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model_path, model)
    log_path = Path(args.out_dir) / "training_log.csv" if args.out_dir else model_path.with_suffix(".log.csv")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    tlog.write_csv(log_path)
    print(
        f"model saved to {model_path} "
        f"(best epoch {tlog.best_epoch}, val_loss {tlog.best_val_loss:.6e})"
    )
    return 0


def _labeled_patch_arrays(manifest, slides, config, model):
    """Score every recorded patch once; return per-slide scores and labels."""
    band, eps = config.band, config.epsilon

    def score_one(slide):
        patches = _slide_patches(manifest, slide, config)
        scores = score_patches(model, patches, band, eps, config.score_batch_size)
        f = np.array([s.f_brown for s in scores], dtype=np.float64)
        base = np.array(
            [baseline_red_fraction(p.image, band) for p in patches], dtype=np.float64
        )
        labels = {tuple(r.origin): r.label for r in slide.patches}
        ann_idx, ann_lab = [], []
        for i, p in enumerate(patches):
            lab = labels.get(tuple(p.origin), "unlabeled")
            if lab != "unlabeled":
                ann_idx.append(i)
                ann_lab.append(lab == "positive")
        ann_idx = np.asarray(ann_idx, dtype=np.intp)
        return f, base, ann_idx, np.asarray(ann_lab, dtype=bool)

    return _ordered_map(score_one, slides, config.jobs)


def cmd_calibrate(args) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest)
    model = load_model(args.model)
    train_slides = [
        s for s in manifest.slides_in(split="train") if s.diagnosis in ("positive", "negative")
    ]
    if not train_slides:
        raise DegenerateLabelsError("manifest has no diagnosed train-split slides")
    scored = _labeled_patch_arrays(manifest, train_slides, config, model)

    ann_scores = np.concatenate([f[idx] for (f, _, idx, _) in scored])
    ann_labels = np.concatenate([lab for (_, _, _, lab) in scored])
    if ann_labels.size == 0 or len(set(ann_labels.tolist())) < 2:
        raise DegenerateLabelsError(
            "calibration needs labeled patches of both classes in the train split"
        )
    patch_roc = roc_curve(ann_scores, ann_labels)
    t_patch = optimal_cutpoint(patch_roc)

    slide_labels = np.array([s.diagnosis == "positive" for s in train_slides])
    if len(set(slide_labels.tolist())) < 2:
        raise DegenerateLabelsError(
            "calibration needs train-split slides of both diagnoses"
        )
    probs = np.array([
        slide_probability_from_scores(f, t_patch) for (f, _, _, _) in scored
    ])
    slide_roc = roc_curve(probs, slide_labels)
    t_slide = optimal_cutpoint(slide_roc)

    thresholds = Thresholds(
        t_patch=t_patch, t_slide=t_slide,
        patch_auc=patch_roc.auc, slide_auc=slide_roc.auc,
    )
    out_path = Path(args.thresholds)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(thresholds.to_json() + "\n")
    print(
        f"t_patch={t_patch:.6g} t_slide={t_slide:.6g} "
        f"patch_auc={patch_roc.auc:.4f} slide_auc={slide_roc.auc:.4f}"
    )
    return 0


def cmd_score(args) -> int:
    config = _run_config(args)
    model = load_model(args.model)
    thresholds = Thresholds.from_json(Path(args.thresholds).read_text())
    img = load_image(args.slide)
    slide_id = Path(args.slide).stem
    try:
        result = score_slide(
            img, model, thresholds,
            slide_id=slide_id,
            band=config.band,
            epsilon=config.epsilon,
            stride=config.stride,
            se_radius=config.se_radius,
            min_tissue_area=config.min_tissue_area,
            batch_size=config.score_batch_size,
            jobs=config.jobs,
        )
    except EmptySlideError as exc:
        log.error("%s", exc)
        print(f"{slide_id}: indeterminate (no tissue found)")
        return 2
    if args.out:
        Path(args.out).write_text(result.to_json() + "\n")
    print(
        f"{slide_id}: {result.diagnosis} "
        f"positive_fraction={result.positive_fraction:.3f}% "
        f"(t_slide={thresholds.t_slide:.6g})"
    )
    return 0


def cmd_crossval(args) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest)
    model = load_model(args.model)
    diagnosed = [s for s in manifest.slides if s.diagnosis in ("positive", "negative")]
    # Slides the autoencoder trained on must not enter evaluation; fall back
    # to all diagnosed slides when the manifest carries no test split.
    eval_slides = [s for s in diagnosed if s.split == "test"] or diagnosed
    scored = _labeled_patch_arrays(manifest, eval_slides, config, model)

    records_ae, records_base = [], []
    for slide, (f, base, idx, lab) in zip(eval_slides, scored):
        positive = slide.diagnosis == "positive"
        records_ae.append(PatientRecord(slide.slide_id, positive, f, f[idx], lab))
        records_base.append(PatientRecord(slide.slide_id, positive, base, base[idx], lab))

    summaries = [
        crossval(records_ae, config.k_folds, config.seed, detector="ae"),
        crossval(records_base, config.k_folds, config.seed, detector="baseline"),
    ]
    out_dir = Path(args.out_dir) if args.out_dir else Path("reports")
    paths = write_reports(out_dir, summaries)
    for s in summaries:
        print(
            f"{s.detector}: accuracy {s.accuracy_mean:.3f} ± {s.accuracy_std:.3f}, "
            f"auc {s.auc_mean:.3f} ± {s.auc_std:.3f} ({s.k} folds, "
            f"{len(eval_slides)} slides)"
        )
    print(f"reports written to {paths['metrics'].parent}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed if args.seed is not None else 42,
        n_negative=args.negative,
        n_low=args.low,
        n_high=args.high,
    )
    manifest = gen_dataset(spec, args.out_dir)
    n = len(manifest.slides)
    print(f"wrote {n} slides to {args.out_dir} (manifest.json alongside)")
    return 0


def cmd_colornorm(args) -> int:
    src = load_image(args.source)
    ref = load_image(args.reference)
    out = normalize_staining(src, ref, lam=args.lam, skip_hist=args.skip_hist)
    save_image(args.out, out)
    print(f"normalized image written to {args.out}")
    return 0


def cmd_samplesize(args) -> int:
    if ":" in args.ratio:
        a, b = args.ratio.split(":", 1)
        try:
            ratio = float(a) / float(b)
        except (ValueError, ZeroDivisionError) as exc:
            raise InvalidInputError(f"bad ratio {args.ratio!r}") from exc
    else:
        try:
            ratio = float(args.ratio)
        except ValueError as exc:
            raise InvalidInputError(f"bad ratio {args.ratio!r}") from exc
    n = roc_sample_size(args.auc_null, args.auc_alt, args.power, args.alpha, ratio)
    print(n)
    return 0


def cmd_gradcheck(args) -> int:
    kinds = OPERATOR_KINDS if args.kind == "all" else (args.kind,)
    seed = args.seed if args.seed is not None else 0
    all_ok = True
    for kind in kinds:
        report = check_operator(kind, n_samples=args.samples, seed=seed, spatial=args.spatial)
        ok = report.passed(args.tol)
        all_ok &= ok
        print(f"{kind}: max_rel_err={report.max_rel_err:.3e} {'PASS' if ok else 'FAIL'}")
        for entry in report.entries:
            log.info(
                "  %s: %d probes, max_rel_err %.3e",
                entry.block, entry.n_checked, entry.max_rel_err,
            )
    return 0 if all_ok else 3


# ---------------------------------------------------------------- parser


def _add_common(p, *names):
    if "manifest" in names:
        p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    if "config" in names:
        p.add_argument("--config", help="JSON config file overriding defaults")
    if "model" in names:
        p.add_argument("--model", required=True, help="autoencoder model file")
    if "thresholds" in names:
        p.add_argument("--thresholds", required=True, help="thresholds JSON file")
    if "out-dir" in names:
        p.add_argument("--out-dir", help="output directory")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="random seed override")
    if "jobs" in names:
        p.add_argument("--jobs", type=int, help="worker cap (results identical)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainscope",
        description="anomalous-stain detection on tissue slides via a "
        "reconstruction autoencoder and hue-band scoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="crop border patches for every manifest slide")
    _add_common(p, "manifest", "config", "out-dir", "seed", "jobs")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the autoencoder on healthy train slides")
    _add_common(p, "manifest", "config", "model", "out-dir", "seed", "jobs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit patch/slide thresholds by ROC")
    _add_common(p, "manifest", "config", "model", "thresholds", "seed", "jobs")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="diagnose one slide image")
    p.add_argument("slide", help="slide image file")
    _add_common(p, "config", "model", "thresholds", "seed", "jobs")
    p.add_argument("--out", help="write the full SlideScore JSON here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("crossval", help="stratified k-fold evaluation + reports")
    _add_common(p, "manifest", "config", "model", "out-dir", "seed", "jobs")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="generator seed (default 42)")
    p.add_argument("--negative", type=int, default=20, help="negative slide count")
    p.add_argument("--low", type=int, default=15, help="low-density slide count")
    p.add_argument("--high", type=int, default=15, help="high-density slide count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("colornorm", help="transfer color statistics between images")
    p.add_argument("--source", required=True, help="image to normalize")
    p.add_argument("--reference", required=True, help="reference image")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--skip-hist", action="store_true", help="skip histogram matching")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-6,
                   help="covariance regularization")
    p.set_defaults(func=cmd_colornorm)

    p = sub.add_parser("samplesize", help="ROC sample-size estimate")
    p.add_argument("--auc-null", type=float, required=True)
    p.add_argument("--auc-alt", type=float, required=True)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--ratio", default="1", help="positive:negative ratio, e.g. 128:117")
    p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--kind", choices=("all",) + OPERATOR_KINDS, default="all")
    p.add_argument("--samples", type=int, default=30, help="probes per parameter block")
    p.add_argument("--spatial", type=int, default=16, help="input height/width")
    p.add_argument("--tol", type=float, default=1e-3, help="max relative error")
    p.add_argument("--seed", type=int, help="probe seed (default 0)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except StainscopeError as exc:
        log.debug("traceback", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
