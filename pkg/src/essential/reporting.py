"""Run-directory bookkeeping: manifest, per-session artifacts, summaries.

Everything written here is plain text so runs can be diffed and audited;
summary tables come in a human-readable and a tab-separated form.
"""

from __future__ import annotations

import os

import numpy as np

from . import metrics
from .datamodel import RunConfig


class ExperimentManifest:
    """Config snapshot hash plus per-session completion status."""

    def __init__(self, config: RunConfig, run_dir: str, num_sessions: int):
        self.config = config.resolve()
        self.run_dir = run_dir
        self.status = {t: "pending" for t in range(num_sessions)}

    def mark(self, session: int, status: str):
        self.status[session] = status
        self.write()

    def mark_first_pending_failed(self):
        for t in sorted(self.status):
            if self.status[t] == "pending":
                self.mark(t, "failed")
                return
        self.write()

    def write(self):
        os.makedirs(self.run_dir, exist_ok=True)
        with open(os.path.join(self.run_dir, "manifest.txt"), "w") as fh:
            fh.write(f"config_hash: {self.config.content_hash()}\n")
            fh.write(f"run_dir: {self.run_dir}\n")
            for t in sorted(self.status):
                fh.write(f"session_{t}: {self.status[t]}\n")
        with open(os.path.join(self.run_dir, "config.cfg"), "w") as fh:
            fh.write(self.config.to_text())


def session_dir(run_dir: str, t: int) -> str:
    return os.path.join(run_dir, f"session_{t:02d}")


def write_session_artifacts(state, run_dir: str, t: int):
    out = session_dir(run_dir, t)
    os.makedirs(out, exist_ok=True)
    report = state.reports[t]
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    state.memory_bank.save_manifest(os.path.join(out, "bank.tsv"))
    state.traj_store.save(os.path.join(out, "trajectories.txt"))
    state.pred_store.save(os.path.join(out, "predicted_entropy.txt"),
                          true_scores=state.traj_store.average_scores())
    np.savez_compressed(
        os.path.join(out, "prototypes.npz"),
        classes=np.asarray(state.expanded.classes),
        virtual_prototypes=state.expanded.prototypes.numpy(),
        virtual_norms=state.expanded.norms.numpy(),
        class_prototypes=state.prototable.prototypes.numpy(),
        source=np.asarray(state.prototable.source))


def summary_rows(label: str, accuracies) -> dict:
    accs = [float(a) for a in accuracies]
    return dict(label=label, accuracies=accs, average=float(np.mean(accs)))


def format_summary_table(rows, reference: dict | None = None) -> tuple[str, str]:
    """(human text, tab-separated text) in ablation-table layout.

    When a reference row is given, every other row gets final and average
    gaps relative to it (reference minus row is negated so that negative
    means the row trails the reference).
    """
    num_sessions = max(len(r["accuracies"]) for r in rows)
    header = ["label"] + [str(t) for t in range(num_sessions)] + ["average"]
    if reference is not None:
        header += ["delta_final", "delta_average"]
    table = [header]
    for row in rows:
        cells = [row["label"]] + [f"{a:.2f}" for a in row["accuracies"]]
        cells += [""] * (num_sessions - len(row["accuracies"]))
        cells.append(f"{row['average']:.2f}")
        if reference is not None:
            if row["label"] == reference["label"]:
                cells += ["-", "-"]
            else:
                d_final, d_avg = metrics.deltas(reference["accuracies"],
                                                row["accuracies"])
                cells += [f"{d_final:.2f}", f"{d_avg:.2f}"]
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    human = "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
        for r in table) + "\n"
    tsv = "\n".join("\t".join(r) for r in table) + "\n"
    return human, tsv


def write_run_artifacts(state, run_dir: str):
    """Summary table and the standard figures for one finished run."""
    rows = [summary_rows("ours", state.accuracies)]
    human, tsv = format_summary_table(rows)
    with open(os.path.join(run_dir, "summary.txt"), "w") as fh:
        fh.write(human)
    with open(os.path.join(run_dir, "summary.tsv"), "w") as fh:
        fh.write(tsv)
    plots = os.path.join(run_dir, "plots")
    os.makedirs(plots, exist_ok=True)
    metrics.plot_accuracy_curve({"ours": state.accuracies},
                                os.path.join(plots, "accuracy_vs_session.png"))
    metrics.plot_uncertainty(state.uncertainty_curves,
                             os.path.join(plots, "uncertainty_vs_epoch.png"))
    final = state.reports[-1]
    metrics.plot_confusion(final.confusion, final.classes,
                           os.path.join(plots, "confusion_final.png"))
    if any(state.bias_curves):
        metrics.plot_bias(state.bias_curves,
                          os.path.join(plots, "bias_vs_epoch.png"))


def load_reports(run_dir: str) -> list[metrics.SessionReport]:
    reports = []
    t = 0
    while os.path.isdir(session_dir(run_dir, t)):
        path = os.path.join(session_dir(run_dir, t), "report.json")
        with open(path) as fh:
            reports.append(metrics.SessionReport.from_json(fh.read()))
        t += 1
    return reports
