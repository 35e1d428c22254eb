"""SVG figures for pose evaluation: trajectory overlay and per-pair rotation error."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so identical inputs give identical files
_RC = {"svg.hashsalt": "npnf", "svg.fonttype": "path"}


def pose_figure(path, est_centres: np.ndarray, gt_centres: np.ndarray,
                rpe_r_deg: np.ndarray) -> Path:
    est_centres = np.asarray(est_centres)
    gt_centres = np.asarray(gt_centres)
    with plt.rc_context(_RC):
        fig = plt.figure(figsize=(9, 4))
        ax = fig.add_subplot(1, 2, 1, projection="3d")
        ax.plot(*gt_centres.T, "o-", color="0.3", label="ground truth")
        ax.plot(*est_centres.T, "o-", color="tab:red", label="estimate (aligned)")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_zlabel("z")
        ax.legend(loc="upper left", fontsize="small")
        bx = fig.add_subplot(1, 2, 2)
        bx.bar(np.arange(len(rpe_r_deg)), rpe_r_deg, color="tab:blue")
        bx.set_xlabel("frame pair (i, i+1)")
        bx.set_ylabel("relative rotation error [deg]")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
