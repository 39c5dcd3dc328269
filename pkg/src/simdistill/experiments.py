"""Run scenarios end to end and persist their artifacts.

Everything written is a deterministic function of (config, seed): no
timestamps, no environment-dependent content. Grid and line outputs render
numbers through the same formatter so the two files carry identical values.
"""

from __future__ import annotations

import os

from .adaptation import _Workspace, run_mtda_experiment
from .models import save_model
from .scenario import ExperimentConfig, ResultsTable, RowResult, serialize_config

ROW_LABELS = {
    "lower_bound": "Lower bound: sup. on source",
    "per_target": "One model per target",
    "blending": "Blending targets",
    "kd_reid": "Multi-teacher distillation",
    "kd_mixed": "Multi-teacher distillation (mixed)",
    "upper_bound": "Upper bound: sup. on targets",
}


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _params_cell(row: RowResult) -> str:
    if row.models_counted > 1:
        return f"{row.models_counted} x {row.complexity.num_parameters}"
    return str(row.complexity.num_parameters)


def report(table: ResultsTable) -> str:
    """Aligned grid mirroring the target-accuracy table layout: per-target
    mAP/R1 columns, average columns, then complexity."""
    headers = ["method"]
    for name in table.target_names:
        headers.extend([f"{name} mAP", "R1"])
    headers.extend(["avg mAP", "R1", "# params", "FLOPs"])
    lines = [headers]
    for row in table.rows:
        cells = [ROW_LABELS.get(row.name, row.name)]
        for metrics in row.per_target:
            cells.extend([_pct(metrics.mAP), _pct(metrics.rank1)])
        cells.extend(
            [
                _pct(row.avg_map),
                _pct(row.avg_rank1),
                _params_cell(row),
                str(row.complexity.flops_per_sample),
            ]
        )
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
    rendered = []
    for line in lines:
        rendered.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
    rendered.insert(1, "-" * len(rendered[0]))
    title = f"scenario {table.scenario_id}  seed {table.seed}  student width {table.student_width!r}"
    return title + "\n" + "\n".join(rendered) + "\n"


def result_lines(table: ResultsTable) -> list[str]:
    """Machine-readable stream, one line per (row, target) plus an average
    line per row; tab-separated."""
    out = []
    for row in table.rows:
        for name, metrics in zip(table.target_names, row.per_target):
            out.append(
                "\t".join(
                    [
                        table.scenario_id,
                        repr(table.student_width),
                        row.name,
                        name,
                        _pct(metrics.mAP),
                        _pct(metrics.rank1),
                        str(row.models_counted),
                        str(row.complexity.num_parameters),
                        str(row.complexity.flops_per_sample),
                    ]
                )
            )
        out.append(
            "\t".join(
                [
                    table.scenario_id,
                    repr(table.student_width),
                    row.name,
                    "average",
                    _pct(row.avg_map),
                    _pct(row.avg_rank1),
                    str(row.models_counted),
                    str(row.complexity.num_parameters),
                    str(row.complexity.flops_per_sample),
                ]
            )
        )
    return out


RESULTS_HEADER = "\t".join(
    ["scenario", "width", "row", "target", "mAP_pct", "rank1_pct", "models", "parameters", "flops"]
)


def _save_checkpoints(table: ResultsTable, directory: str) -> list[str]:
    paths = []
    for row_name, model in table.trained_models.items():
        models = model if isinstance(model, list) else [model]
        for idx, m in enumerate(models):
            suffix = f"_t{idx + 1}" if len(models) > 1 else ""
            path = os.path.join(
                directory, f"{row_name}_w{table.student_width!r}{suffix}.ckpt"
            )
            save_model(
                m,
                path,
                extra={
                    "scenario": table.scenario_id,
                    "seed": table.seed,
                    "row": row_name,
                    "student_width": table.student_width,
                },
            )
            paths.append(path)
    return paths


def run(cfg: ExperimentConfig, log=lambda msg: None) -> tuple[list[ResultsTable], list[str]]:
    """Execute the scenario for every student width and write all artifacts.

    Returns the tables and the list of written paths.
    """
    cfg.validate()
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    ckpt_dir = os.path.join(outdir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    written = []

    echo_path = os.path.join(outdir, "config_echo.cfg")
    with open(echo_path, "w") as fh:
        fh.write(serialize_config(cfg))
    written.append(echo_path)

    workspace = _Workspace(cfg)
    tables = []
    grids = []
    lines = [RESULTS_HEADER]
    for width in cfg.student_widths:
        log(f"running width {width!r}")
        table = run_mtda_experiment(cfg, width=width, workspace=workspace)
        tables.append(table)
        grids.append(report(table))
        lines.extend(result_lines(table))
        written.extend(_save_checkpoints(table, ckpt_dir))

    grid_path = os.path.join(outdir, "results_grid.txt")
    with open(grid_path, "w") as fh:
        fh.write("\n".join(grids))
    written.append(grid_path)

    tsv_path = os.path.join(outdir, "results.tsv")
    with open(tsv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(tsv_path)

    if len(cfg.student_widths) > 1:
        row_names = [row.name for row in tables[0].rows]
        for row_name in row_names:
            series_path = os.path.join(outdir, f"sweep_{row_name}.tsv")
            with open(series_path, "w") as fh:
                fh.write("# parameters\tavg_mAP\n")
                for table in tables:
                    row = table.row(row_name)
                    fh.write(f"{row.complexity.num_parameters}\t{row.avg_map!r}\n")
            written.append(series_path)
    return tables, written
