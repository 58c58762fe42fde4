"""PNG renderings of the CSV series the command line writes."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"figure.figsize": (6.0, 4.0), "axes.grid": True, "grid.alpha": 0.3,
          "font.size": 10, "savefig.dpi": 120}
_NO_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_NO_META)
    plt.close(fig)


def plot_spectrum(path, n, energies, alpha_e0l, d):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(n, np.asarray(energies) / (np.pi ** 2 / 2), "o")
        ax.set_xlabel("level n")
        ax.set_ylabel(r"$E_n / E_0$")
        ax.set_title(rf"$\alpha = {alpha_e0l:g}\,E_0L$, $d = {d:g}$")
        _save(fig, path)


def plot_trajectory(path, t, alpha_e0l, occ, n_show=4):
    """Occupations |c_n(t)|^2 above, alpha(t) below."""
    occ = np.asarray(occ)
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6, 5))
        for n in range(min(n_show, occ.shape[1])):
            ax1.plot(t, occ[:, n], label=f"$|c_{n + 1}|^2$")
        if occ.shape[1] > 2:
            ax1.plot(t, occ[:, 2:].sum(axis=1), "k:", label=r"$\sum_{n>2}$")
        ax1.set_ylabel("occupation")
        ax1.legend(fontsize=8)
        ax2.plot(t, alpha_e0l, color="C3")
        ax2.set_xlabel("t")
        ax2.set_ylabel(r"$\alpha / E_0L$")
        _save(fig, path)


def plot_sweep(path, d, occ1, occ2, occ_higher, mark=None, band=None):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(d, occ1, label=r"$|c_1(T)|^2$")
        ax.plot(d, occ2, label=r"$|c_2(T)|^2$")
        ax.plot(d, occ_higher, "k:", label=r"$\sum_{n>2}|c_n(T)|^2$")
        ax.axhline(0.5, color="0.6", lw=0.8)
        if mark is not None:
            ax.axvline(mark, color="C3", lw=0.8, ls="--")
        if band is not None:
            ax.axvspan(band[0], band[1], color="C3", alpha=0.12)
        ax.set_xlabel("d")
        ax.set_ylabel("final occupation")
        ax.legend(fontsize=8)
        _save(fig, path)


def plot_rewards(path, episodes, rewards, window=50):
    r = np.asarray(rewards, dtype=float)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(episodes, r, ".", ms=2, alpha=0.4)
        if len(r) >= window:
            ok = np.where(np.isnan(r), 0.0, r)
            avg = np.convolve(ok, np.ones(window) / window, mode="valid")
            ax.plot(np.asarray(episodes)[window - 1:], avg, color="C3", label=f"{window}-episode mean")
            ax.legend(fontsize=8)
        ax.set_xlabel("episode")
        ax.set_ylabel("cumulative reward")
        _save(fig, path)


def plot_protocol(path, t, alpha_e0l, knots=None):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(t, alpha_e0l)
        if knots is not None:
            kt, ka = zip(*knots)
            ax.plot(kt, ka, "o", ms=4)
        ax.set_xlabel("t")
        ax.set_ylabel(r"$\alpha / E_0L$")
        _save(fig, path)
