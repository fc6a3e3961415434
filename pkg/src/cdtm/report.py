"""Table-shaped CSV, detail JSON and figures for one experiment."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path

from . import plotting
from .experiment import ExperimentResult, MetricRow, plan_to_dict


@dataclass
class ReportFiles:
    csv: Path
    json: Path
    figures: list[Path]

    def all(self) -> list[Path]:
        return [self.csv, self.json, *self.figures]


def _ordered(values) -> list:
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def summarize(rows: list[MetricRow], targets: list[str], tags: list[str]) -> list[dict]:
    out = []
    for d in targets:
        for tag in tags:
            rs = [r for r in rows if r.domain == d and r.model_tag == tag]
            if not rs:
                continue
            aucs = [r.auc for r in rs]
            imps = [r.imp_pct for r in rs]
            out.append({
                "domain": d, "model_tag": tag,
                "auc_mean": statistics.fmean(aucs),
                "auc_std": statistics.pstdev(aucs) if len(aucs) > 1 else 0.0,
                "imp_mean": statistics.fmean(imps),
                "imp_std": statistics.pstdev(imps) if len(imps) > 1 else 0.0,
                "negative_transfer_seeds": sum(r.negative_transfer for r in rs),
                "n_seeds": len(rs),
            })
    return out


def format_imp(value: float) -> str:
    return f"{value:.2f}%"


def table_csv(summary: list[dict], targets: list[str], tags: list[str], stamp_line: str) -> str:
    lookup = {(s["domain"], s["model_tag"]): s for s in summary}
    buf = io.StringIO()
    buf.write(f"# {stamp_line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Flight"] + [c for tag in tags for c in (f"{tag} AUC", f"{tag} Imp")])
    for t in targets:
        row = [t]
        for tag in tags:
            s = lookup.get((t, tag))
            row += ["", ""] if s is None else [f"{s['auc_mean']:.4f}", format_imp(s["imp_mean"])]
        w.writerow(row)
    return buf.getvalue()


def render_report(rows: list[MetricRow], out_dir: str | Path, task: int, stamp: str, *,
                  fingerprint: str = "", seeds: list[int] | None = None, tags: list[str] | None = None,
                  targets: list[str] | None = None, curves: dict | None = None, align: dict | None = None,
                  plan: dict | None = None, figures: bool = True) -> ReportFiles:
    """Write ``task{N}_{stamp}.csv``/``.json`` (and figures) into ``out_dir``."""
    if not rows:
        raise ValueError("cannot render a report without metric rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tags = tags or _ordered(r.model_tag for r in rows)
    targets = targets or _ordered(r.domain for r in rows)
    seeds = seeds if seeds is not None else _ordered(r.seed for r in rows)
    summary = summarize(rows, targets, tags)
    # fixed order so a re-render from the sorted JSON draws identically
    curves = {t: dict(sorted(curves[t].items())) for t in tags if t in (curves or {})}
    align = {t: dict(sorted(align[t].items())) for t in tags if t in (align or {})}
    stamp_line = f"config={fingerprint} seeds={','.join(map(str, seeds))} task={task}"
    negative = [{"domain": r.domain, "model_tag": r.model_tag, "seed": r.seed, "imp_pct": r.imp_pct}
                for r in rows if r.negative_transfer]

    base = out_dir / f"task{task}_{stamp}"
    csv_path = base.with_suffix(".csv")
    csv_path.write_text(table_csv(summary, targets, tags, stamp_line))
    detail = {
        "task": task, "config_fingerprint": fingerprint, "seeds": seeds, "tags": tags, "targets": targets,
        "plan": plan, "rows": [asdict(r) for r in rows], "summary": summary,
        "negative_transfer": negative, "loss_curves": curves, "align_curves": align,
    }
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(detail, indent=1, sort_keys=True))

    figs = []
    if figures:
        fig = plotting.auc_bars(summary, targets, tags, f"Task {task}: test AUC by target")
        figs.append(plotting.save(fig, f"{base}_auc.png", stamp_line))
        if curves:
            fig = plotting.loss_curves(curves, f"Task {task}: target loss during training", tags)
            figs.append(plotting.save(fig, f"{base}_loss.png", stamp_line))
        if align:
            fig = plotting.loss_curves(align, f"Task {task}: alignment distance during training", tags,
                                       ylabel="mean ||E_c - T G_c||^2 per batch")
            figs.append(plotting.save(fig, f"{base}_align.png", stamp_line))
    return ReportFiles(csv_path, json_path, figs)


def curves_for(result: ExperimentResult, kind: str = "loss") -> dict[str, dict[str, list]]:
    """Per-target curves keyed ``[tag]["<domain>/seed<n>"]``; ``kind`` is ``loss`` or ``align``."""
    curves: dict[str, dict[str, list]] = {}
    for run in result.runs:
        src = run.loss_curve if kind == "loss" else run.align_curve
        for d in run.test_auc:
            if src.get(d):
                curves.setdefault(run.tag, {})[f"{d}/seed{run.seed}"] = [list(p) for p in src[d]]
    return curves


def render_experiment(result: ExperimentResult, out_dir: str | Path, stamp: str, fingerprint: str = "",
                      figures: bool = True) -> ReportFiles:
    return render_report(result.rows, out_dir, result.plan.task, stamp, fingerprint=fingerprint,
                         seeds=list(result.plan.seeds), tags=result.plan.tags(), targets=list(result.plan.targets),
                         curves=curves_for(result), align=curves_for(result, "align"),
                         plan=plan_to_dict(result.plan), figures=figures)


def rerender(json_path: str | Path, out_dir: str | Path, stamp: str) -> ReportFiles:
    """Rebuild CSV and figures from a saved detail JSON."""
    d = json.loads(Path(json_path).read_text())
    rows = [MetricRow(**r) for r in d["rows"]]
    return render_report(rows, out_dir, d["task"], stamp, fingerprint=d["config_fingerprint"], seeds=d["seeds"],
                         tags=d["tags"], targets=d["targets"], curves=d.get("loss_curves"), align=d.get("align_curves"), plan=d.get("plan"))
