"""PNG figures for equilibria, stability scans, spectra and growing modes.

Every figure is drawn on the Agg backend and stamped with the
configuration hash, both as a footer and in the PNG metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_equilibrium", "plot_scan", "plot_spectrum", "plot_mode", "cross_section_mesh"]

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def cross_section_mesh(grid):
    """Cell-corner coordinates ``(R, Z)`` of the polar grid for ``pcolormesh``."""
    r_edges = np.linspace(0.0, 1.0, grid.n_r + 1)
    t_edges = np.linspace(0.0, 2 * np.pi, grid.n_theta + 1) - 0.5 * grid.dtheta
    rr, tt = np.meshgrid(r_edges, t_edges, indexing="ij")
    return grid.a + rr * np.cos(tt), rr * np.sin(tt)


def _panel(ax, grid, values, title, cmap="RdBu_r"):
    big_r, z = cross_section_mesh(grid)
    vals = np.asarray(values).reshape(grid.n_r, grid.n_theta)
    lim = float(np.abs(vals).max()) or 1.0
    kw = {"vmin": -lim, "vmax": lim} if cmap == "RdBu_r" else {}
    mesh = ax.pcolormesh(big_r, z, vals, cmap=cmap, shading="flat", **kw)
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.set_xlabel("R")
    ax.set_ylabel("Z")
    ax.grid(False)
    plt.colorbar(mesh, ax=ax, shrink=0.8)


def _save(fig, path, config_hash):
    if config_hash:
        fig.text(0.99, 0.01, f"config {config_hash}", ha="right", va="bottom", fontsize=6, color="0.5")
    fig.savefig(path, metadata={"Description": f"config_hash={config_hash}"})
    plt.close(fig)
    return str(path)


def plot_equilibrium(eq, path, config_hash: str = ""):
    """Potentials and poloidal field strength over the cross-section."""
    from .equilibrium import reconstruct_fields

    _, b_f = reconstruct_fields(eq)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.4), constrained_layout=True)
        _panel(axes[0], eq.grid, eq.phi, "electric potential")
        _panel(axes[1], eq.grid, eq.a_phi, "toroidal vector potential")
        _panel(axes[2], eq.grid, np.hypot(*b_f), "poloidal |B|", cmap="viridis")
        return _save(fig, path, config_hash)


def plot_scan(rows, path, config_hash: str = ""):
    """Witness form, smallest eigenvalue and witness terms against ``K``."""
    ok = [r for r in rows if "error" not in r]
    k = np.array([r["K"] for r in ok])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), constrained_layout=True)
        ax = axes[0]
        ax.plot(k, [r["witness_form"] for r in ok], "o-", label="witness form")
        ax.plot(k, [r["kappa"] for r in ok], "s--", label="smallest eigenvalue")
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("K")
        ax.set_yscale("symlog", linthresh=1.0)
        ax.legend()
        ax = axes[1]
        for name in ("I", "II", "III"):
            ax.plot(k, [abs(r[name]) for r in ok], "o-", label=f"|{name}|")
        pos = k > 0
        if np.any(pos):
            ref = abs(ok[int(np.argmax(k))]["I"]) * (k[pos] / k.max()) ** 2
            ax.plot(k[pos], ref, "k:", label="K^2 reference")
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("K")
        ax.legend()
        return _save(fig, path, config_hash)


def plot_spectrum(table, n: int, path, config_hash: str = "", lambda0: float | None = None):
    """Index-``n`` eigenvalue and negative-eigenvalue counts along ``lambda``."""
    lam = np.array([r["lambda"] for r in table])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), constrained_layout=True)
        axes[0].plot(lam, [r["index_n_eigenvalue"] for r in table], "o-")
        axes[0].axhline(0.0, color="k", lw=0.8)
        axes[0].set_xscale("log")
        axes[0].set_yscale("symlog", linthresh=1.0)
        axes[0].set_xlabel("lambda")
        axes[0].set_title(f"eigenvalue of index {n}")
        axes[1].step(lam, [r["count"] for r in table], where="mid")
        axes[1].axhline(n, color="k", lw=0.8, ls=":")
        axes[1].set_xscale("log")
        axes[1].set_xlabel("lambda")
        axes[1].set_title("negative eigenvalues")
        if lambda0:
            for ax in axes:
                ax.axvline(lambda0, color="C3", lw=0.8)
        return _save(fig, path, config_hash)


def plot_mode(mode, grid, path, config_hash: str = ""):
    """Potentials and toroidal field components of a growing mode."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(8.5, 6.8), constrained_layout=True)
        _panel(axes[0, 0], grid, mode.a_phi, "A_phi")
        _panel(axes[0, 1], grid, mode.phi, "phi")
        _panel(axes[1, 0], grid, mode.e_field[2], "E_phi")
        _panel(axes[1, 1], grid, mode.b_field[2], "B_phi")
        fig.suptitle(f"growing mode, lambda0 = {mode.lam:.5g}")
        return _save(fig, path, config_hash)
