"""Command-line front end and experiment orchestration.

Output layout under ``--out``::

    rep<i>/data/                 synthesized sequences + manifest.json
    rep<i>/<model>/model.ckpt    checkpoint, plus train_log.csv
    rep<i>/eval/<model>/         per-repetition predictions and metrics
    eval/<model>/                aggregate over repetitions + run_record.json
    report/                      model comparison
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from . import config as C
from . import diffusion as D
from . import localize as L
from . import metrics as M
from . import vae as V
from . import wavesim as W
from .errors import ConfigError, DataContractError, LuvtError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OUTPUT_FILES = ("predictions.csv", "roc_points.csv", "pr_curve.csv", "summary.csv", "roc.svg", "pr_curve.svg")


# ---------------------------------------------------------------------------
# config -> module objects


def sim_config(cfg: dict, seed: int = 0) -> W.SimConfig:
    return W.SimConfig(
        region_mm=tuple(cfg["sim.region_mm"]),
        grid=tuple(cfg["sim.grid"]),
        wave_speed_mm_per_us=cfg["sim.wave_speed_mm_per_us"],
        source_center_frequency_MHz=cfg["sim.source_center_frequency_MHz"],
        source_position=(cfg["sim.source_row"], 0.5),
        dt_us=cfg["sim.dt_us"],
        n_steps=cfg["sim.n_steps"],
        frame_stride=cfg["sim.frame_stride"],
        n_frames=cfg["sim.n_frames"],
        image_size=tuple(cfg["sim.image_size"]),
        seed=seed,
    )


def simplex_config(cfg: dict, seed: int = 0) -> D.SimplexNoiseConfig:
    return D.SimplexNoiseConfig(cfg["ddpm.simplex_octaves"], cfg["ddpm.simplex_frequency"], cfg["ddpm.simplex_persistence"], seed)


def ddpm_train_config(cfg: dict, seed: int) -> D.DiffusionTrainConfig:
    return D.DiffusionTrainConfig(
        T=cfg["ddpm.T"],
        epochs=cfg["ddpm.epochs"],
        batch_size=cfg["ddpm.batch_size"],
        lr=cfg["ddpm.lr"],
        weight_decay=cfg["ddpm.weight_decay"],
        noise_kind=cfg["ddpm.noise_kind"],
        simplex=simplex_config(cfg),
        widths=tuple(cfg["ddpm.widths"]),
        hflip=cfg["ddpm.hflip"],
        seed=seed,
        checkpoint_every=cfg["ddpm.checkpoint_every"],
        ema_decay=cfg["ddpm.ema_decay"],
    )


def vae_train_config(cfg: dict, seed: int) -> V.VaeTrainConfig:
    return V.VaeTrainConfig(
        epochs=cfg["vae.epochs"],
        batch_size=cfg["vae.batch_size"],
        lr=cfg["vae.lr"],
        weight_decay=cfg["vae.weight_decay"],
        widths=tuple(cfg["vae.widths"]),
        latent_dim=cfg["vae.latent_dim"],
        hflip=cfg["vae.hflip"],
        seed=seed,
        checkpoint_every=cfg["vae.checkpoint_every"],
    )


def lambda_depth(cfg: dict) -> int:
    return cfg["ddpm.lambda_t"] or D.default_depth(cfg["ddpm.T"])


# ---------------------------------------------------------------------------
# paths and splits


def rep_dir(cfg: dict, rep: int) -> Path:
    return Path(cfg["out"]) / f"rep{rep}"


def data_dir(cfg: dict, rep: int) -> Path:
    return rep_dir(cfg, rep) / "data"


def checkpoint_path(cfg: dict, rep: int, model: Optional[str] = None) -> Path:
    return rep_dir(cfg, rep) / (model or cfg["model"]) / "model.ckpt"


@dataclass
class Split:
    train: list[str]
    val: list[str]
    test: list[str]


def split_ids(records: Sequence[dict], cfg: dict) -> Split:
    ok = sorted(r["id"] for r in records if r["label"] == "defect-free")
    bad = sorted(r["id"] for r in records if r["label"] != "defect-free")
    n_test_ok, n_val, n_test_bad = cfg["split.test_defect_free"], cfg["split.val_defect_free"], cfg["split.test_defective"]
    if n_test_ok + n_val >= len(ok) or n_test_bad > len(bad):
        raise DataContractError(
            f"dataset has {len(ok)} defect-free / {len(bad)} defective sequences, too few for the configured split"
        )
    return Split(train=ok[n_test_ok + n_val:], val=ok[n_test_ok:n_test_ok + n_val], test=ok[:n_test_ok] + bad[:n_test_bad])


def sequence_seed(base: int, seq_id: str) -> int:
    return int(np.random.SeedSequence([base, zlib.crc32(seq_id.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# stages


def cmd_synth(cfg: dict, log=print) -> list[dict]:
    records = []
    for rep in range(cfg["repetitions"]):
        seed = C.stage_seed(cfg["seed"], "synth", rep)
        out = data_dir(cfg, rep)
        recs = W.synth_dataset(
            cfg["data.n_defect_free"], cfg["data.n_defective"], sim_config(cfg), seed, out,
            diameter_mm=cfg["data.defect_diameter_mm"], workers=cfg["data.workers"],
        )
        n_def = sum(r["label"] != "defect-free" for r in recs)
        log(f"synth rep{rep}: {len(recs) - n_def} defect-free, {n_def} defective -> {out}")
        records.append(recs)
    return records


def _load_split(cfg: dict, rep: int) -> tuple[Path, Split]:
    ddir = data_dir(cfg, rep)
    if not (ddir / "manifest.json").exists():
        raise DataContractError(f"no dataset at {ddir}; run 'synth' first")
    return ddir, split_ids(W.load_manifest(ddir), cfg)


def cmd_train(cfg: dict, resume: bool = True, stop_after: Optional[int] = None, log=print) -> list[Path]:
    model = cfg["model"]
    paths = []
    for rep in range(cfg["repetitions"]):
        ddir, split = _load_split(cfg, rep)
        seqs = W.load_dataset(ddir, split.train)
        ckpt = checkpoint_path(cfg, rep)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        if not resume and ckpt.exists():
            ckpt.unlink()

        def progress(epoch, loss, rep=rep):
            log(f"train {model} rep{rep} epoch {epoch} loss {loss:.6g}")

        if model == "ddpm":
            tc = ddpm_train_config(cfg, C.stage_seed(cfg["seed"], "train-ddpm", rep))
            _, tlog = D.train_ddpm(seqs, tc, str(ckpt), resume=resume, stop_after=stop_after, progress=progress)
        else:
            tc = vae_train_config(cfg, C.stage_seed(cfg["seed"], "train-vae", rep))
            _, tlog = V.train_vae(seqs, tc, str(ckpt), resume=resume, stop_after=stop_after, progress=progress)
        tlog.write_csv(ckpt.parent / "train_log.csv")
        paths.append(ckpt)
    return paths


class Reconstructor:
    """Frozen model plus the settings needed to reconstruct one sequence."""

    def __init__(self, cfg: dict, rep: int):
        self.cfg = cfg
        self.kind = cfg["model"]
        ckpt = checkpoint_path(cfg, rep)
        if not ckpt.exists():
            raise DataContractError(f"missing checkpoint {ckpt}; run 'train' first")
        if self.kind == "ddpm":
            self.model, meta = D.load_denoiser(ckpt)
            self.schedule = D.cosine_schedule(int(meta["train_config"]["T"]))
        else:
            self.model, meta = V.load_vae(ckpt)
        self.base_seed = C.stage_seed(cfg["seed"], "reconstruct", rep)

    def __call__(self, seq: W.ImageSequence) -> np.ndarray:
        x = D.to_model_range(seq.frames)
        if self.kind == "vae":
            return D.from_model_range(V.reconstruct(self.model, x))
        rc = D.ReconstructionConfig(
            lambda_t=lambda_depth(self.cfg),
            noise_kind=self.cfg["ddpm.noise_kind"],
            seed=sequence_seed(self.base_seed, seq.id),
            simplex=simplex_config(self.cfg),
        )
        return D.from_model_range(D.reconstruct(self.model, x, rc, self.schedule))


@dataclass
class RepResult:
    rep: int
    roc: M.RocCurve
    pr: list[M.PrecisionRecall]
    summary: dict[str, Any]
    predictions: list[dict] = field(default_factory=list)


@dataclass
class Calibration:
    score_threshold: float
    thresholds: tuple[float, ...]
    decision_threshold: float


def _val_pairs(recon: Reconstructor, ddir: Path, split: Split) -> list[tuple[np.ndarray, np.ndarray]]:
    if not split.val:
        raise ConfigError("calibration needs split.val_defect_free > 0")
    return [(seq.frames, recon(seq)) for seq in W.load_dataset(ddir, split.val)]


def calibrate(cfg: dict, recon: Reconstructor, ddir: Path, split: Split) -> Calibration:
    """Resolve the score threshold, threshold grid and decision threshold.

    Calibrated values come from the defect-free validation sequences only:
    the score threshold is the largest validation residual and the decision
    threshold the largest validation component score, each times a margin.
    """
    pairs: Optional[list] = None
    mode = cfg["eval.score_threshold"]
    if mode == "calibrate":
        pairs = _val_pairs(recon, ddir, split)
        tau = cfg["eval.calibration_margin"] * max(float(L.diff_map(x, xh).max()) for x, xh in pairs)
    else:
        tau = float(mode)
    grid = tuple(cfg["localize.thresholds"])
    if cfg["localize.scale_thresholds"]:
        grid = tuple(t * tau / M.DEFAULT_SCORE_THRESHOLD for t in grid)
    mode = cfg["localize.decision_threshold"]
    if mode == "default":
        decision = L.default_decision_threshold(tuple(cfg["sim.image_size"]))
    elif mode == "calibrate":
        pairs = pairs or _val_pairs(recon, ddir, split)
        probe = L.LocalizationParams(grid, cfg["localize.connectivity"], math.inf)
        decision = cfg["localize.calibration_margin"] * max(
            L.localize_sequence(x, xh, probe).prediction.component_score for x, xh in pairs
        )
    else:
        decision = float(mode)
    return Calibration(tau, grid, decision)


def evaluate_rep(cfg: dict, rep: int, log=print) -> RepResult:
    ddir, split = _load_split(cfg, rep)
    recon = Reconstructor(cfg, rep)
    cal = calibrate(cfg, recon, ddir, split)
    params = L.LocalizationParams(cal.thresholds, cfg["localize.connectivity"], cal.decision_threshold)
    tau = cal.score_threshold
    samples, records, preds = [], [], []
    for seq in W.load_dataset(ddir, split.test):
        xhat = recon(seq)
        res = L.localize_sequence(seq.frames, xhat, params)
        label = int(seq.is_defective)
        if cfg["eval.granularity"] == "frame":
            for k, m in enumerate(res.maps):
                samples.append(M.ScoredSample(f"{seq.id}/{k}", M.anomaly_score(m, tau), label))
        score = M.anomaly_score(res.maps, tau)
        if cfg["eval.granularity"] == "sequence":
            samples.append(M.ScoredSample(seq.id, score, label))
        p = res.prediction
        rec = M.LocalizationRecord(seq.id, p.verdict, label, p.centroid_px, seq.defect_center_px)
        records.append(rec)
        d = rec.distance()
        preds.append({
            "id": seq.id,
            "label": seq.label,
            "anomaly_score": score,
            "verdict": p.verdict,
            "centroid_row": p.centroid_px[0] if p.centroid_px else None,
            "centroid_col": p.centroid_px[1] if p.centroid_px else None,
            "component_score": p.component_score,
            "component_area": p.component_area,
            "truth_row": seq.defect_center_px[0] if seq.defect_center_px else None,
            "truth_col": seq.defect_center_px[1] if seq.defect_center_px else None,
            "distance_px": d,
        })
    roc = M.roc_auc(samples)
    pr = M.curves_over_r(records, range(cfg["eval.r_max"] + 1))
    at = M.precision_recall_at(records, cfg["eval.r_report"])
    errors = [q["distance_px"] for q in preds if q["label"] != "defect-free" and q["verdict"] == "defective"]
    summary = {
        "auroc": roc.auroc,
        "precision": at.precision,
        "recall": at.recall,
        "precision_degenerate": int(at.precision_degenerate),
        "recall_degenerate": int(at.recall_degenerate),
        "median_centroid_error_px": statistics.median(errors) if errors else math.nan,
        "true_positive_detections": len(errors),
        "false_alarms": sum(q["label"] == "defect-free" and q["verdict"] == "defective" for q in preds),
        "score_threshold": tau,
        "decision_threshold": cal.decision_threshold,
    }
    log(f"evaluate {cfg['model']} rep{rep}: AUROC {roc.auroc:.4f}, precision@{cfg['eval.r_report']:g} {at.precision:.3f}, "
        f"recall@{cfg['eval.r_report']:g} {at.recall:.3f}")
    return RepResult(rep, roc, pr, summary, preds)


SUMMARY_FIELDS = ("auroc", "precision", "recall", "precision_degenerate", "recall_degenerate",
                  "median_centroid_error_px", "true_positive_detections", "false_alarms", "score_threshold", "decision_threshold")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_predictions(path: Path, preds: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        cols = list(preds[0]) if preds else ["id"]
        out.writerow(cols)
        for p in preds:
            out.writerow([_cell(p[c]) for c in cols])


def write_summary(path: Path, rows: list[tuple[str, dict]], r_report: float) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["repetition", "r"] + list(SUMMARY_FIELDS))
        for name, s in rows:
            out.writerow([name, f"{r_report:g}"] + [_cell(s[k]) for k in SUMMARY_FIELDS])


def _write_rep(out: Path, model: str, res: RepResult, r_report: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.csv", res.predictions)
    M.write_roc_csv(out / "roc_points.csv", res.roc, model)
    M.write_pr_csv(out / "pr_curve.csv", res.pr, model)
    write_summary(out / "summary.csv", [(str(res.rep), res.summary)], r_report)
    M.write_roc_svg(out / "roc.svg", {model: res.roc})
    M.write_pr_svg(out / "pr_curve.svg", {model: res.pr})


def mean_pr(reps: Sequence[RepResult]) -> list[M.PrecisionRecall]:
    out = []
    for rows in zip(*(r.pr for r in reps)):
        out.append(M.PrecisionRecall(
            rows[0].r,
            float(np.mean([x.precision for x in rows])),
            float(np.mean([x.recall for x in rows])),
            sum(x.tp for x in rows), sum(x.fp for x in rows), sum(x.fn for x in rows),
            any(x.precision_degenerate for x in rows), any(x.recall_degenerate for x in rows),
        ))
    return out


def mean_summary(reps: Sequence[RepResult]) -> dict:
    out = {}
    for k in SUMMARY_FIELDS:
        vals = [r.summary[k] for r in reps]
        if k.endswith("_degenerate"):
            out[k] = int(any(vals))
        else:
            out[k] = float(np.mean(vals))
    return out


def cmd_evaluate(cfg: dict, log=print) -> dict:
    model = cfg["model"]
    t0 = time.perf_counter()
    reps = []
    for rep in range(cfg["repetitions"]):
        res = evaluate_rep(cfg, rep, log)
        _write_rep(rep_dir(cfg, rep) / "eval" / model, model, res, cfg["eval.r_report"])
        reps.append(res)
    agg_dir = Path(cfg["out"]) / "eval" / model
    agg_dir.mkdir(parents=True, exist_ok=True)
    agg = mean_summary(reps)
    write_summary(agg_dir / "summary.csv", [(str(r.rep), r.summary) for r in reps] + [("mean", agg)], cfg["eval.r_report"])
    pr = mean_pr(reps)
    M.write_pr_csv(agg_dir / "pr_curve.csv", pr, model)
    with open(agg_dir / "roc_points.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["model", "repetition", "fpr", "tpr"])
        for r in reps:
            for f, t in zip(r.roc.fpr, r.roc.tpr):
                out.writerow([model, r.rep, f"{f:.6f}", f"{t:.6f}"])
    M.write_roc_svg(agg_dir / "roc.svg", {f"{model} rep{r.rep}": r.roc for r in reps})
    M.write_pr_svg(agg_dir / "pr_curve.svg", {model: pr})
    degenerate = [k for k in ("precision_degenerate", "recall_degenerate") if agg[k]]
    if degenerate:
        log(f"warning: degenerate metrics ({', '.join(degenerate)}): no qualifying predictions, reported as 0")
    (agg_dir / "resolved.conf").write_text(C.format_config(cfg))
    record = {
        "run_id": f"{model}-seed{cfg['seed']}-reps{cfg['repetitions']}",
        "config": _json_config(cfg),
        "wall_time_s": {"train": _train_wall(cfg), "evaluate": time.perf_counter() - t0},
        "artifacts": sorted(str(p) for p in agg_dir.iterdir()),
        "repetitions": [{"rep": r.rep, **r.summary} for r in reps],
        "mean": agg,
    }
    (agg_dir / "run_record.json").write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
    return record


def _train_wall(cfg: dict) -> list[Optional[float]]:
    walls = []
    for rep in range(cfg["repetitions"]):
        path = checkpoint_path(cfg, rep).parent / "train_log.csv"
        rows = list(csv.DictReader(path.read_text().splitlines())) if path.exists() else []
        walls.append(float(rows[-1]["wall_time_s"]) if rows else None)
    return walls


def _json_config(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def _read_summary_mean(path: Path) -> dict:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return next(r for r in rows if r["repetition"] == "mean")


def cmd_report(cfg: dict, log=print) -> dict:
    root = Path(cfg["out"])
    found = {m: root / "eval" / m for m in ("ddpm", "vae") if (root / "eval" / m / "summary.csv").exists()}
    if not found:
        raise DataContractError(f"no evaluation results under {root / 'eval'}; run 'evaluate' first")
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = {m: _read_summary_mean(d / "summary.csv") for m, d in found.items()}
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "r"] + list(SUMMARY_FIELDS))
        for m, r in rows.items():
            w.writerow([m, r["r"]] + [r[k] for k in SUMMARY_FIELDS])
    rocs, prs = {}, {}
    for m, d in found.items():
        with open(d / "roc_points.csv") as fh:
            pts = [r for r in csv.DictReader(fh) if r["repetition"] == "0"]
        fpr = np.array([float(p["fpr"]) for p in pts])
        tpr = np.array([float(p["tpr"]) for p in pts])
        rocs[m] = M.RocCurve(fpr, tpr, np.array([]), float(rows[m]["auroc"]))
        with open(d / "pr_curve.csv") as fh:
            prs[m] = [M.PrecisionRecall(float(r["r"]), float(r["precision"]), float(r["recall"]), int(r["tp"]), int(r["fp"]),
                                        int(r["fn"]), r["precision_degenerate"] == "1", r["recall_degenerate"] == "1")
                      for r in csv.DictReader(fh)]
    M.write_roc_svg(out / "roc.svg", rocs)
    M.write_pr_svg(out / "pr_curve.svg", prs)
    for m, r in rows.items():
        log(f"{m}: AUROC {float(r['auroc']):.4f}  precision@{r['r']} {float(r['precision']):.3f}  recall@{r['r']} {float(r['recall']):.3f}")
    return rows


# ---------------------------------------------------------------------------
# CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="luvtad", description="Synthetic ultrasonic anomaly detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("synth", "train", "evaluate", "report"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--model", choices=("ddpm", "vae"))
        s.add_argument("--out", help=f"output root (default: ${C.OUT_ENV} or ./luvtad_out)")
        s.add_argument("--repetitions", type=int)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        if name == "train":
            s.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
            s.add_argument("--stop-after", type=int, help="stop after this many epochs (checkpoint is kept)")
    return p


def resolve_args(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for k in ("seed", "model", "out", "repetitions"):
        if getattr(args, k) is not None:
            overrides[k] = getattr(args, k)
    return C.resolve(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_args(args)
        torch.set_num_threads(1)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=not args.fresh, stop_after=args.stop_after)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        else:
            cmd_report(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error[{exc.reason}]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (LuvtError, OSError, ValueError) as exc:
        reason = getattr(exc, "reason", "io" if isinstance(exc, OSError) else "error")
        print(f"error[{reason}]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
