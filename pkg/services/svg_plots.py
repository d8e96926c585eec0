from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from jinja2 import Template

TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"
CLASS_COLORS = {"ventilated": "#c0392b", "not_ventilated": "#2e86c1"}
WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 20, "top": 34, "bottom": 44}


def load_template(name: str) -> Template:
    path = TEMPLATES_DIR / name
    if not path.exists():
        raise FileNotFoundError(f"Template not found: {path}")
    return Template(path.read_text())


class _Axes:
    """Data-to-pixel mapping for one chart"""

    def __init__(self, x_range: Tuple[float, float], y_range: Tuple[float, float]):
        self.left, self.right = MARGIN["left"], WIDTH - MARGIN["right"]
        self.top, self.bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]
        self.x_lo, self.x_hi = x_range if x_range[1] > x_range[0] else (x_range[0], x_range[0] + 1.0)
        self.y_lo, self.y_hi = y_range if y_range[1] > y_range[0] else (y_range[0], y_range[0] + 1.0)

    def x(self, value: float) -> float:
        return round(self.left + (value - self.x_lo) / (self.x_hi - self.x_lo) * (self.right - self.left), 2)

    def y(self, value: float) -> float:
        return round(self.bottom - (value - self.y_lo) / (self.y_hi - self.y_lo) * (self.bottom - self.top), 2)

    def ticks(self, n: int = 5) -> Dict[str, List[Dict]]:
        xs = np.linspace(self.x_lo, self.x_hi, n)
        ys = np.linspace(self.y_lo, self.y_hi, n)
        return {
            "x_ticks": [{"pos": self.x(v), "label": f"{v:.3g}"} for v in xs],
            "y_ticks": [{"pos": self.y(v), "label": f"{v:.3g}"} for v in ys],
        }

    def context(self) -> Dict:
        return dict(width=WIDTH, height=HEIGHT, left=self.left, right=self.right, top=self.top,
                    bottom=self.bottom, **self.ticks())


def _points(axes: _Axes, xs: Sequence[float], ys: Sequence[float]) -> str:
    return " ".join(f"{axes.x(a)},{axes.y(b)}" for a, b in zip(xs, ys))


def class_mean_chart(class_means: pd.DataFrame, title: str = "Mean risk trajectory by class") -> str:
    """Mean ± std band per class over the grid hours"""
    axes = _Axes((float(class_means["hour"].min()), float(class_means["hour"].max())), (0.0, 1.0))
    series_list = []
    for name, group in class_means.groupby("class", sort=True):
        group = group.sort_values("hour")
        hours = group["hour"].tolist()
        mean, std = group["mean"].to_numpy(), group["std"].to_numpy()
        upper = np.clip(mean + std, 0.0, 1.0)
        lower = np.clip(mean - std, 0.0, 1.0)
        band = _points(axes, hours + hours[::-1], upper.tolist() + lower[::-1].tolist())
        series_list.append({"name": name, "color": CLASS_COLORS.get(name, "#555555"),
                            "points": _points(axes, hours, mean.tolist()), "band": band})
    return load_template("line_chart.svg.j2").render(
        title=title, x_label="hours since admission", y_label="normalized risk score",
        series_list=series_list, **axes.context())


def slope_robustness_scatter(patient_metrics: pd.DataFrame, title: str = "Consistency vs robustness") -> str:
    """One dot per patient: fitted slope against robustness, colored by class"""
    slopes = patient_metrics["slope"].to_numpy()
    robustness = patient_metrics["robustness"].to_numpy()
    axes = _Axes((float(slopes.min()), float(slopes.max())), (float(robustness.min()), 1.0))
    groups = []
    for name, group in patient_metrics.groupby("class", sort=True):
        groups.append({"name": name, "color": CLASS_COLORS.get(name, "#555555"),
                       "points": [(axes.x(s), axes.y(r)) for s, r in zip(group["slope"], group["robustness"])]})
    return load_template("scatter.svg.j2").render(
        title=title, x_label="slope per hour", y_label="robustness", groups=groups, **axes.context())


def write_svg(svg: str, path):
    Path(path).write_text(svg)
