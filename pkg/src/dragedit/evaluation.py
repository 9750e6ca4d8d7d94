"""Point-displacement evaluation.

Scores an edit batch by the mean Euclidean distance between where content
ended up (declared keypoints, detector-agnostic) and where it was asked to
go. The targets file also carries the points' initial locations, whose
distance to the targets is the do-nothing upper bound a successful edit must
beat. Timing totals are split into preparing (inversion) and inference
(sampling), mirroring how this family of editors is usually reported.

targets.json:
    {"v": 1, "items": [{"id": "...", "targets": [[y,x],...],
                        "initial": [[y,x],...]}, ...]}
results dir, one "<id>.json" per item:
    {"v": 1, "points": [[y,x],...],
     "timings": {"preparing_seconds": ..., "inference_seconds": ...}}
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .errors import ContractError

EVAL_VERSION = 1


def euclidean(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def mean_point_distance(points, targets) -> float:
    if len(points) != len(targets):
        raise ContractError(
            f"point count mismatch: {len(points)} edited vs {len(targets)} targets"
        )
    if not points:
        raise ContractError("cannot score an empty point set")
    return sum(euclidean(p, t) for p, t in zip(points, targets)) / len(points)


def _check_version(payload: dict, source: str) -> None:
    if not isinstance(payload, dict) or payload.get("v") != EVAL_VERSION:
        raise ContractError(f"{source}: expected JSON object with v={EVAL_VERSION}")


def load_targets(path) -> list[dict]:
    payload = json.loads(Path(path).read_text())
    _check_version(payload, str(path))
    items = payload.get("items")
    if not isinstance(items, list) or not items:
        raise ContractError(f"{path}: 'items' must be a nonempty list")
    for item in items:
        for key in ("id", "targets", "initial"):
            if key not in item:
                raise ContractError(f"{path}: item missing {key!r}")
        if len(item["targets"]) != len(item["initial"]):
            raise ContractError(f"{path}: item {item['id']!r} targets/initial counts differ")
    return items


def load_result(results_dir, item_id: str) -> dict:
    path = Path(results_dir) / f"{item_id}.json"
    if not path.exists():
        raise ContractError(f"missing result file {path}")
    payload = json.loads(path.read_text())
    _check_version(payload, str(path))
    if "points" not in payload:
        raise ContractError(f"{path}: missing 'points'")
    return payload


def evaluate(results_dir, targets_path) -> dict:
    items = load_targets(targets_path)
    rows = []
    sum_dist = 0.0
    sum_initial = 0.0
    n_points = 0
    timings = {"preparing_seconds": 0.0, "inference_seconds": 0.0}
    for item in items:
        result = load_result(results_dir, item["id"])
        dist = mean_point_distance(result["points"], item["targets"])
        initial = mean_point_distance(item["initial"], item["targets"])
        k = len(item["targets"])
        rows.append(
            {
                "id": item["id"],
                "mean_distance": dist,
                "initial_distance": initial,
                "point_count": k,
            }
        )
        sum_dist += dist * k
        sum_initial += initial * k
        n_points += k
        for key in timings:
            timings[key] += float(result.get("timings", {}).get(key, 0.0))
    return {
        "v": EVAL_VERSION,
        "items": rows,
        "mean_distance": sum_dist / n_points,
        "initial_distance": sum_initial / n_points,
        "point_count": n_points,
        "timings": timings,
    }


def format_report(report: dict) -> str:
    lines = [
        f"{'item':<20} {'points':>6} {'distance':>12} {'from':>12}",
    ]
    for row in report["items"]:
        lines.append(
            f"{row['id']:<20} {row['point_count']:>6d} "
            f"{row['mean_distance']:>12.4f} {row['initial_distance']:>12.4f}"
        )
    lines.append(
        f"{'overall':<20} {report['point_count']:>6d} "
        f"{report['mean_distance']:>12.4f} {report['initial_distance']:>12.4f}"
    )
    t = report["timings"]
    lines.append(
        f"timings: preparing {t['preparing_seconds']:.3f}s, "
        f"inference {t['inference_seconds']:.3f}s"
    )
    return "\n".join(lines)
