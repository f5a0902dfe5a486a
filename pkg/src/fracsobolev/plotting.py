"""SVG figures for the CLI: value-vs-level, scaled K profiles, domains and meshes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no date stamp, so repeated runs give stable files
matplotlib.rcParams["svg.hashsalt"] = "fracsobolev"
_META = {"Date": None, "Creator": "fracsobolev"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_levels(series: dict, path: str | Path, title: str = "", ylabel: str = "value") -> Path:
    """One line per entry of ``series``: name -> (levels, values)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, (levels, values) in series.items():
        ax.plot(levels, values, marker="o", label=name)
    ax.set_xlabel("refinement level")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_kprofile(profile, path: str | Path, s: float | None = None) -> Path:
    """ell^-s K(ell) for both methods on log axes."""
    s = profile.s if s is None else s
    s = 0.0 if s is None else s
    ells = np.asarray(profile.scales)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ks in (("opt", profile.k_opt), ("constructive", profile.k_constructive)):
        ks = np.asarray(ks, float)
        if np.all(np.isfinite(ks)):
            ax.loglog(ells, ells ** -s * ks, marker="o", label=name)
    ax.set_xlabel("scale")
    ax.set_ylabel(f"scale^-{s:g} K")
    ax.set_title(f"{profile.fn_id} on {profile.domain_id}, p={profile.p:g}")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_domain(spec, path: str | Path, mesh=None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if mesh is not None:
        ax.triplot(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles, lw=0.3, color="0.6")
    for chain in (spec.outer, *spec.holes):
        c = np.vstack([chain, chain[:1]])
        ax.plot(c[:, 0], c[:, 1], color="k", lw=0.8)
    for sl in spec.slits:
        ax.plot(sl[:, 0], sl[:, 1], color="r", lw=1.2)
    ax.set_aspect("equal")
    ax.set_title(spec.name)
    fig.tight_layout()
    return _save(fig, path)
