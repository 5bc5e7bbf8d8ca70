"""JSON and CSV emitters. Column schemas live in CSV_SCHEMAS and are versioned."""

import csv
import json
import math
import os
from dataclasses import asdict, is_dataclass

import numpy as np

CSV_SCHEMA_VERSION = 1

CSV_SCHEMAS = {
    "sweep": ["kappa", "mask_total", "tom_mean", "tom_overall", "perplexity", "selected"],
    "tom": ["bucket", "accuracy"],
    "localization": ["length", "similarity"],
    "spectrum": ["layer", "head", "matrix", "dominant", "top1", "top2", "top3", "alignment_distance"],
    "sinks": ["layer", "n_rows", "n_shifted", "ratio", "mean_change"],
    "geometry": ["state", "q_norm", "k_bos_norm", "k_others_norm", "angle_q_k_bos", "angle_q_k_others"],
    "mask_rank": [
        "matrix",
        "weight_rank",
        "mask_rank",
        "nonzero_rows",
        "nonzero_cols",
        "popcount",
        "normalized_min",
        "normalized_rows",
        "normalized_cols",
    ],
    "delta_attn": ["max_abs_delta", "max_abs_term1", "max_abs_term2", "max_abs_term3", "residual"],
    "diag_dominance": ["matrix", "mean_abs_diag", "mean_abs_offdiag", "ratio", "size"],
}


def to_jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _fresh(path):
    if os.path.exists(path):
        raise FileExistsError(f"{path} already exists")


def write_json(path, obj) -> None:
    _fresh(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(path, schema: str, rows) -> None:
    """Rows are dicts; columns follow CSV_SCHEMAS[schema], extra keys are appended sorted."""
    _fresh(path)
    cols = list(CSV_SCHEMAS[schema])
    extra = sorted({k for r in rows for k in r} - set(cols))
    cols += extra
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, "")) for k in cols})


def _cell(v):
    v = to_jsonable(v)
    if v is None:
        return "nan"
    return v


# row builders


def sweep_rows(result) -> list:
    rows = []
    for p in result.points:
        r = {
            "kappa": p.kappa,
            "mask_total": p.mask_total,
            "tom_mean": p.tom["mean"],
            "tom_overall": p.tom["overall"],
            "perplexity": p.perplexity,
            "selected": int(p.kappa == result.selected_kappa),
        }
        for k, v in p.tom["per_condition"].items():
            r[f"tom:{k}"] = v
        for n, s in (p.localization or {}).items():
            r[f"loc:{n}"] = s
        rows.append(r)
    return rows


def tom_rows(res: dict) -> list:
    rows = [{"bucket": k, "accuracy": v} for k, v in res["per_condition"].items()]
    rows.append({"bucket": "mean", "accuracy": res["mean"]})
    rows.append({"bucket": "overall", "accuracy": res["overall"]})
    return rows


def localization_rows(curve: dict) -> list:
    return [{"length": n, "similarity": s} for n, s in sorted(curve.items(), key=lambda kv: int(kv[0]))]


def spectrum_rows(rows) -> list:
    out = []
    for r in rows:
        top = list(r.top3) + [""] * (3 - len(r.top3))
        out.append(
            {
                "layer": r.layer,
                "head": r.head,
                "matrix": r.matrix,
                "dominant": r.dominant,
                "top1": top[0],
                "top2": top[1],
                "top3": top[2],
                "alignment_distance": r.alignment_distance,
            }
        )
    return out


def sink_rows(rep) -> list:
    return [
        {"layer": l, "n_rows": rep.n_rows[l], "n_shifted": rep.n_shifted[l], "ratio": rep.ratio[l], "mean_change": rep.mean_change[l]}
        for l in range(len(rep.ratio))
    ]


def geometry_rows(rep) -> list:
    rows = [dict(state=s, **v) for s, v in rep.states.items()]
    rows.append(dict(state="delta_before_after_rope", **rep.delta_01))
    rows.append(dict(state="delta_after_rope_after_perturbation", **rep.delta_12))
    return rows


def mask_rank_rows(report: dict) -> list:
    return [dict(matrix=name, **asdict(st)) for name, st in report.items()]
