"""Figure rendering for the report command (headless, PNG files)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_accuracy_compute(curves_by_label, path):
    """Accuracy against mean compute fraction, one line per strategy per
    labelled group; oracle points drawn as stars."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    styles = ["-", "--", ":", "-."]
    for g, (label, rows) in enumerate(sorted(curves_by_label.items())):
        style = styles[g % len(styles)]
        by_strategy = {}
        for row in rows:
            by_strategy.setdefault(row["strategy"], []).append(row)
        for strategy, pts in sorted(by_strategy.items()):
            pts = sorted(pts, key=lambda r: r["compute_fraction"])
            xs = [p["compute_fraction"] for p in pts]
            ys = [p["accuracy"] for p in pts]
            if strategy == "oracle":
                ax.plot(xs, ys, "*", markersize=12,
                        label=f"{label}: oracle")
            else:
                ax.plot(xs, ys, style, marker="o", markersize=3,
                        label=f"{label}: {strategy}")
    ax.set_xlabel("mean compute fraction")
    ax.set_ylabel("accuracy")
    ax.set_title("accuracy vs compute")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_exit(values_by_label, path, ylabel, title):
    """Grouped bars over exits (NaN entries are skipped)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = sorted(values_by_label)
    width = 0.8 / max(1, len(labels))
    for g, label in enumerate(labels):
        values = values_by_label[label]
        xs = [i + g * width for i in range(len(values))]
        ys = [0.0 if v is None or v != v else v for v in values]
        ax.bar(xs, ys, width=width, label=label)
    n = max(len(v) for v in values_by_label.values())
    ax.set_xticks([i + 0.4 - width / 2 for i in range(n)])
    ax.set_xticklabels([str(i + 1) for i in range(n)])
    ax.set_xlabel("exit")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_threshold_curves(rows_by_label, path, fields=("UT_pct", "OT_pct")):
    """UT/OT percentages against the confidence threshold grid."""
    fig, ax = plt.subplots(figsize=(6, 4))
    markers = {"UT_pct": "o", "OT_pct": "s"}
    for label, rows in sorted(rows_by_label.items()):
        rows = [r for r in rows if r["strategy"] == "confidence"]
        rows = sorted(rows, key=lambda r: r["threshold"])
        xs = [r["threshold"] for r in rows]
        for field in fields:
            ax.plot(xs, [r[field] for r in rows],
                    marker=markers.get(field, "o"),
                    label=f"{label}: {field}")
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("% of O")
    ax.set_title("under/overthinking vs threshold")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
