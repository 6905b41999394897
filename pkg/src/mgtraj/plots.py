"""Raster figures for predictions: sample overlay, position heatmap, prior bars."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mgtraj.datamodel import AgentTrack, PredictionSet, SceneGrid  # noqa: E402


def _scene_extent(scene: SceneGrid):
    x0, y0 = scene.origin
    return (x0, x0 + scene.width * scene.cell_size, y0, y0 + scene.height * scene.cell_size)


def _draw_scene(ax, scene: SceneGrid):
    ax.imshow(scene.cells, origin="lower", extent=_scene_extent(scene), cmap="Greys", vmin=0, vmax=1.5, interpolation="nearest")


def overlay(path, scene: SceneGrid, target: AgentTrack, pset: PredictionSet):
    """Observed path, annotated futures, and every sample colored by its generator."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_scene(ax, scene)
    cmap = plt.get_cmap("tab10")
    last = target.observed[-1]
    for s in pset.samples:
        traj = np.vstack([last, s.trajectory])
        ax.plot(traj[:, 0], traj[:, 1], color=cmap(s.generator_index % 10), lw=0.8, alpha=0.7)
    for fut in target.futures:
        traj = np.vstack([last, fut])
        ax.plot(traj[:, 0], traj[:, 1], "k--", lw=1.2)
    ax.plot(target.observed[:, 0], target.observed[:, 1], "k.-", lw=2)
    handles = [plt.Line2D([], [], color=cmap(g % 10)) for g in sorted(set(pset.generator_indices()))]
    ax.legend(handles, [f"G{g}" for g in sorted(set(pset.generator_indices()))], loc="upper right")
    _zoom(ax, target, pset.trajectories())
    ax.set_aspect("equal")
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _zoom(ax, target, trajectories, pad=2.0):
    pts = np.concatenate([target.observed, trajectories.reshape(-1, 2)])
    lo, hi = pts.min(0) - pad, pts.max(0) + pad
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])


def heatmap(path, scene: SceneGrid, target: AgentTrack, trajectories: np.ndarray):
    """2D histogram of predicted positions on the scene's own cell grid."""
    x0, x1, y0, y1 = _scene_extent(scene)
    xe = np.linspace(x0, x1, scene.width + 1)
    ye = np.linspace(y0, y1, scene.height + 1)
    pts = trajectories.reshape(-1, 2)
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=(xe, ye))
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_scene(ax, scene)
    masked = np.ma.masked_equal(counts.T, 0)
    ax.imshow(masked, origin="lower", extent=(x0, x1, y0, y1), cmap="inferno", interpolation="nearest", alpha=0.9)
    ax.plot(target.observed[:, 0], target.observed[:, 1], "c.-", lw=2)
    _zoom(ax, target, trajectories)
    ax.set_title(f"{len(trajectories)} samples")
    ax.set_aspect("equal")
    fig.savefig(path, dpi=100)
    plt.close(fig)


def priors_bar(path, priors: np.ndarray, threshold: float):
    """One bar per generator with the activation threshold drawn across."""
    fig, ax = plt.subplots(figsize=(4, 3))
    idx = np.arange(len(priors))
    colors = ["tab:blue" if p > threshold else "lightgray" for p in priors]
    ax.bar(idx, priors, color=colors)
    ax.axhline(threshold, color="tab:red", ls="--", lw=1)
    ax.set_xticks(idx)
    ax.set_xticklabels([f"G{g}" for g in idx])
    ax.set_ylim(0, 1)
    ax.set_ylabel("prior")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
