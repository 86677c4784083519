"""Command-line front end.

Every report starts with a ``# manifest {...}`` line holding the command, the
fully resolved config and the sha256 of each input file. ``replay`` feeds that
line back through the same runner, so a report can always be regenerated.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import sys
import tempfile
from importlib import metadata

import click
import numpy as np

from .assignment import kmeans_anchors
from .geometry import Box, PenaltyKind
from .gradcheck import check_gradients, sample_box_pairs
from .losses import CoeffConfig, CoeffMode, LossConfig, NegativeBranch, SampleKind, iou_coefficient
from .postprocess import Detection, GroundTruth, evaluate_ap, nms
from .simulation import (
    BenchmarkConfig,
    PUBLISHED_ARGMIN_DEG,
    SweepConfig,
    ToyConfig,
    direction_sweep,
    moving_vector_ratio,
    moving_vector_ratio_geometric,
    run_regression_benchmark,
    run_toy_experiment,
    summarize_benchmark,
)

EXIT_OK, EXIT_INVALID, EXIT_TOLERANCE = 0, 1, 2
MANIFEST_PREFIX = "# manifest "


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class ToleranceFailure(Exception):
    """Raised after the report is written when a checked tolerance is missed."""


# -- input parsing -----------------------------------------------------------------


class ParseError(click.ClickException):
    def __init__(self, path, line, field, reason):
        super().__init__(f"{path}:{line}: field {field!r}: {reason}")


def _number(rec, key, path, line):
    if key not in rec:
        raise ParseError(path, line, key, "missing")
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(path, line, key, f"expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ParseError(path, line, key, "must be finite")
    return float(v)


def _box(rec, path, line) -> Box:
    cx, cy, w, h = (_number(rec, k, path, line) for k in ("cx", "cy", "w", "h"))
    for key, v in (("w", w), ("h", h)):
        if v <= 0:
            raise ParseError(path, line, key, "must be positive")
    return Box(cx, cy, w, h)


def _records(path):
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(path, n, "<json>", e.msg) from None
            if not isinstance(rec, dict):
                raise ParseError(path, n, "<json>", "expected an object")
            yield n, rec


def _image_id(rec, path, line):
    v = rec.get("image_id", "0")
    if isinstance(v, bool) or not isinstance(v, (str, int)):
        raise ParseError(path, line, "image_id", f"expected a string or integer, got {v!r}")
    return str(v)


def read_boxes(path) -> list[Box]:
    return [_box(rec, path, n) for n, rec in _records(path)]


def read_detections(path) -> list[Detection]:
    out = []
    for n, rec in _records(path):
        box = _box(rec, path, n)
        score = _number(rec, "score", path, n)
        if not 0.0 <= score <= 1.0:
            raise ParseError(path, n, "score", "must lie in [0, 1]")
        out.append(Detection(box, score, _image_id(rec, path, n)))
    return out


def read_ground_truths(path) -> list[GroundTruth]:
    return [GroundTruth(_box(rec, path, n), _image_id(rec, path, n)) for n, rec in _records(path)]


def detection_record(d: Detection) -> dict:
    return {"cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h,
            "score": d.score, "image_id": d.image_id}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- runners: (config, inputs) -> (body, tolerance_ok) -------------------------------


def _csv(rows, header) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def run_sweep(cfg, inputs):
    n = cfg["steps"]
    if n >= 8:
        prof = direction_sweep(SweepConfig(cfg["a"], cfg["dr"], n))
        r, r_geo = prof.r_diou, prof.r_geometric
    else:
        # grids coarser than the library minimum: same closed form, evaluated directly
        theta = 2 * np.pi * np.arange(n) / n
        r = moving_vector_ratio(theta, cfg["a"], cfg["dr"])
        r_geo = [moving_vector_ratio_geometric(float(t), cfg["a"], cfg["dr"]) for t in theta]
    header = ["theta_deg", "r_diou"] + (["r_geometric"] if cfg["geometric"] else [])
    rows = []
    for i in range(n):
        row = [360.0 * i / n, float(r[i])]
        if cfg["geometric"]:
            row.append(float(r_geo[i]))
        rows.append(row)
    body = _csv(rows, header)
    argmin_deg = 360.0 * int(np.argmin(r)) / n
    matches = abs(argmin_deg - PUBLISHED_ARGMIN_DEG) <= 360.0 / n
    body += f"argmin,{argmin_deg!r}\n"
    body += f"# published_argmin_deg={PUBLISHED_ARGMIN_DEG!r} matches_published={_cell(matches)}\n"
    return body, True


def run_gradcheck(cfg, inputs):
    pairs = sample_box_pairs(cfg["n"], seed=cfg["seed"])
    rows, ok = [], True
    for name in cfg["kinds"]:
        res = check_gradients(name, pairs, cfg["step"])
        passed = res.passed(cfg["tol"])
        ok &= passed
        rows.append([name, res.n, float(res.max_rel_err), cfg["tol"], passed])
    return _csv(rows, ["kind", "n", "max_rel_err", "tol", "passed"]), ok


def run_converge(cfg, inputs):
    bench = BenchmarkConfig(
        kinds=tuple(PenaltyKind.parse(k) for k in cfg["kinds"]),
        lr=cfg["lr"], max_steps=cfg["max_steps"], iou_tol=cfg["iou_tol"],
        dist_tol=cfg["dist_tol"], center_only=cfg["center_only"],
        penalty_only=cfg["penalty_only"], seed=cfg["seed"],
    )
    report = run_regression_benchmark(bench)
    rows = []
    for kind, runs in report.items():
        for r in runs:
            s = r.start
            rows.append([kind.value, s.cx, s.cy, s.w, s.h, r.initial_iou, r.final_iou,
                         r.final_distance, r.steps, r.converged, r.diverged])
    body = _csv(rows, ["kind", "cx", "cy", "w", "h", "initial_iou", "final_iou",
                       "final_distance", "steps", "converged", "diverged"])
    summary = json.dumps(summarize_benchmark(report), sort_keys=True, allow_nan=True)
    return body + f"# summary {summary}\n", True


def run_toy(cfg, inputs):
    loss = LossConfig(
        alpha=cfg["alpha"],
        loc_kind=PenaltyKind.parse(cfg["loc_kind"]),
        coeff_mode=CoeffMode.parse(cfg["coeff_mode"]),
        coeff=CoeffConfig(cfg["gamma"], NegativeBranch[cfg["negative_branch"]]),
    )
    toy = ToyConfig(loss=loss, lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"])
    return _json(run_toy_experiment(toy).as_dict()), True


def run_cluster(cfg, inputs):
    boxes = read_boxes(inputs["boxes"])
    if not boxes:
        raise click.ClickException(f"{inputs['boxes']}: no boxes")
    if cfg["k"] > len(boxes):
        raise click.ClickException(f"--k {cfg['k']} exceeds the {len(boxes)} boxes in {inputs['boxes']}")
    clusters = kmeans_anchors([(b.w, b.h) for b in boxes], cfg["k"], seed=cfg["seed"], metric=cfg["metric"])
    return _csv([[c.w, c.h, c.member_count] for c in clusters], ["w", "h", "members"]), True


def run_nms(cfg, inputs):
    kept = nms(read_detections(inputs["dets"]), cfg["iou"])
    return "".join(json.dumps(detection_record(d), sort_keys=True) + "\n" for d in kept), True


def run_eval(cfg, inputs):
    dets = read_detections(inputs["dets"])
    gts = read_ground_truths(inputs["gts"])
    return _json(evaluate_ap(dets, gts).as_dict()), True


def run_coeff(cfg, inputs):
    n = cfg["steps"]
    rows = []
    for gamma in cfg["gammas"]:
        default = CoeffConfig(gamma)
        printed = CoeffConfig(gamma, NegativeBranch.IoUPowAsPrinted)
        for i in range(n + 1):
            v = i / n
            rows.append([v, gamma,
                         iou_coefficient(SampleKind.Positive, v, default),
                         iou_coefficient(SampleKind.Negative, v, default),
                         iou_coefficient(SampleKind.Negative, v, printed)])
    return _csv(rows, ["iou", "gamma", "positive", "negative", "negative_as_printed"]), True


RUNNERS = {
    "sweep": run_sweep,
    "gradcheck": run_gradcheck,
    "converge": run_converge,
    "toy": run_toy,
    "cluster": run_cluster,
    "nms": run_nms,
    "eval": run_eval,
    "coeff": run_coeff,
}


# -- emission ----------------------------------------------------------------------


def build_manifest(command, cfg, inputs, out) -> dict:
    return {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": _version(),
        "inputs": {k: {"path": p, "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        "outputs": [out] if out else [],
    }


def render(manifest: dict) -> tuple[str, bool]:
    inputs = {k: v["path"] for k, v in manifest["inputs"].items()}
    body, ok = RUNNERS[manifest["command"]](manifest["config"], inputs)
    head = MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    return head + body, ok


def write_atomic(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(text: str, out):
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def execute(command, cfg, inputs, out):
    manifest = build_manifest(command, cfg, inputs, out)
    text, ok = render(manifest)
    emit(text, out)
    if not ok:
        raise ToleranceFailure(f"{command}: tolerance not met")


# -- click wiring ------------------------------------------------------------------


POSITIVE = click.FloatRange(min=0.0, min_open=True)
out_option = click.option("--out", type=click.Path(dir_okay=False), default=None,
                          help="Write the report here (atomically) instead of stdout.")
seed_option = click.option("--seed", type=int, default=0, show_default=True)
KIND_NAMES = [k.value for k in PenaltyKind if k is not PenaltyKind.L1Norm]


@click.group()
@click.version_option(_version(), package_name="artifact")
def cli():
    """IoU-family box losses: sweeps, gradient checks and evaluation tools."""


@cli.command()
@click.option("--a", type=POSITIVE, default=1.0, show_default=True, help="Box side.")
@click.option("--dr", type=POSITIVE, default=0.1, show_default=True, help="Step length of the move.")
@click.option("--steps", type=click.IntRange(min=1), default=360, show_default=True)
@click.option("--geometric", is_flag=True, help="Add the true enclosing-box column.")
@out_option
def sweep(a, dr, steps, geometric, out):
    """Normalized center distance as a function of move direction."""
    execute("sweep", {"a": a, "dr": dr, "steps": steps, "geometric": geometric}, {}, out)


@cli.command()
@click.option("--kind", "kinds", type=click.Choice(KIND_NAMES + ["all"]), multiple=True, default=["all"],
              show_default=True)
@click.option("--n", type=click.IntRange(min=1), default=1000, show_default=True)
@seed_option
@click.option("--tol", type=POSITIVE, default=1e-5, show_default=True)
@click.option("--step", type=POSITIVE, default=1e-6, show_default=True)
@out_option
def gradcheck(kinds, n, seed, tol, step, out):
    """Compare analytic gradients with central differences; exit 2 on failure."""
    names = KIND_NAMES if "all" in kinds else list(dict.fromkeys(kinds))
    execute("gradcheck", {"kinds": names, "n": n, "seed": seed, "tol": tol, "step": step}, {}, out)


@cli.command()
@click.option("--kind", "kinds", type=click.Choice(KIND_NAMES), multiple=True,
              default=KIND_NAMES, show_default=True)
@click.option("--lr", type=POSITIVE, default=0.1, show_default=True)
@click.option("--max-steps", type=click.IntRange(min=0), default=500, show_default=True)
@click.option("--iou-tol", type=click.FloatRange(0.0, 1.0), default=0.9, show_default=True)
@click.option("--dist-tol", type=POSITIVE, default=None)
@click.option("--center-only", is_flag=True)
@click.option("--penalty-only", is_flag=True, help="Descend on the distance term alone (diou/miou).")
@seed_option
@out_option
def converge(kinds, lr, max_steps, iou_tol, dist_tol, center_only, penalty_only, seed, out):
    """Gradient-descent box regression from the default start grid."""
    cfg = {"kinds": list(kinds), "lr": lr, "max_steps": max_steps, "iou_tol": iou_tol,
           "dist_tol": dist_tol, "center_only": center_only, "penalty_only": penalty_only, "seed": seed}
    execute("converge", cfg, {}, out)


@cli.command()
@click.option("--coeff-mode", type=click.Choice([m.value for m in CoeffMode]), default="none", show_default=True)
@click.option("--gamma", type=POSITIVE, default=2.0, show_default=True)
@click.option("--negative-branch", type=click.Choice([b.name for b in NegativeBranch]),
              default=NegativeBranch.OneMinusIoUPow.name, show_default=True)
@click.option("--loc-kind", type=click.Choice([k.value for k in PenaltyKind]), default="miou", show_default=True)
@click.option("--alpha", type=POSITIVE, default=1.0, show_default=True)
@click.option("--lr", type=POSITIVE, default=ToyConfig.lr, show_default=True)
@click.option("--epochs", type=click.IntRange(min=0), default=200, show_default=True)
@seed_option
@out_option
def toy(coeff_mode, gamma, negative_branch, loc_kind, alpha, lr, epochs, seed, out):
    """Train free per-anchor parameters on the synthetic scene."""
    cfg = {"coeff_mode": coeff_mode, "gamma": gamma, "negative_branch": negative_branch,
           "loc_kind": loc_kind, "alpha": alpha, "lr": lr, "epochs": epochs, "seed": seed}
    execute("toy", cfg, {}, out)


@cli.command()
@click.argument("boxes", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=click.IntRange(min=1), required=True)
@click.option("--metric", type=click.Choice(["iou", "euclidean"]), default="iou", show_default=True)
@seed_option
@out_option
def cluster(boxes, k, metric, seed, out):
    """k-means anchor sizes from a boxes JSONL file."""
    execute("cluster", {"k": k, "metric": metric, "seed": seed}, {"boxes": boxes}, out)


@cli.command("nms")
@click.argument("dets", type=click.Path(exists=True, dir_okay=False))
@click.option("--iou", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@out_option
def nms_cmd(dets, iou, out):
    """Greedy NMS over a detections JSONL file."""
    execute("nms", {"iou": iou}, {"dets": dets}, out)


@cli.command("eval")
@click.argument("dets", type=click.Path(exists=True, dir_okay=False))
@click.argument("gts", type=click.Path(exists=True, dir_okay=False))
@out_option
def eval_cmd(dets, gts, out):
    """AP, AP50, AP75 and size-binned AP."""
    execute("eval", {}, {"dets": dets, "gts": gts}, out)


@cli.command()
@click.option("--gamma", "gammas", type=POSITIVE, multiple=True, default=[0.5, 1.0, 2.0, 3.0], show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=20, show_default=True)
@out_option
def coeff(gammas, steps, out):
    """Tabulate the IoU coefficient for positives and negatives."""
    execute("coeff", {"gammas": list(gammas), "steps": steps}, {}, out)


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith(MANIFEST_PREFIX):
        raise click.ClickException(f"{path}:1: no manifest line")
    try:
        manifest = json.loads(first[len(MANIFEST_PREFIX):])
    except json.JSONDecodeError as e:
        raise click.ClickException(f"{path}:1: bad manifest: {e.msg}") from None
    if manifest.get("command") not in RUNNERS:
        raise click.ClickException(f"{path}:1: unknown command {manifest.get('command')!r}")
    return manifest


@cli.command()
@click.argument("report", type=click.Path(exists=True, dir_okay=False))
@click.option("--check", is_flag=True, help="Exit 1 unless the regenerated report matches byte for byte.")
@out_option
def replay(report, check, out):
    """Regenerate a report from its manifest line."""
    manifest = read_manifest(report)
    for key, entry in manifest["inputs"].items():
        if not os.path.exists(entry["path"]):
            raise click.ClickException(f"input {key!r} missing: {entry['path']}")
        if sha256_file(entry["path"]) != entry["sha256"]:
            raise click.ClickException(f"input {key!r} changed since the report was made: {entry['path']}")
    text, ok = render(manifest)
    if check:
        with open(report, encoding="utf-8", newline="") as fh:
            if fh.read() != text:
                raise click.ClickException(f"{report}: replay differs from the stored report")
    emit(text, out)
    if not ok:
        raise ToleranceFailure(f"{manifest['command']}: tolerance not met")


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="detloss", standalone_mode=False)
    except ToleranceFailure as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_TOLERANCE
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INVALID
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except (ValueError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_INVALID
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
