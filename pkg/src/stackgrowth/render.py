"""Image output: binary portable pixmaps of cluster state and matplotlib
report figures for sweep summaries."""

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

# direction code -> final-rotor color (W yellow, S red, E blue, N green)
ROTOR_COLORS = np.array([
    [0, 160, 0],      # N
    [0, 0, 255],      # E
    [255, 0, 0],      # S
    [255, 255, 0],    # W
], dtype=np.uint8)
BACKGROUND = np.array([255, 255, 255], dtype=np.uint8)

# chip count -> color: -1 red, 0 white, 1 black, 2 blue, 3 green
CHIP_COLORS = {
    -1: (255, 0, 0),
    0: (255, 255, 255),
    1: (0, 0, 0),
    2: (0, 0, 255),
    3: (0, 160, 0),
}
CHIP_OUT_OF_RANGE = (255, 0, 255)


def write_ppm(path, rgb):
    """Binary P6 pixmap; rgb is (rows, cols, 3) uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def _crop_window(field, pad=1):
    ix, iy = np.nonzero(field.data)
    w = field.half_width
    if ix.size == 0:
        return -pad, pad, -pad, pad
    return (int(ix.min()) - w - pad, int(ix.max()) - w + pad,
            int(iy.min()) - w - pad, int(iy.max()) - w + pad)


def _window_values(field, x0, x1, y0, y1):
    side = x1 - x0 + 1
    xs = np.arange(x0, x1 + 1, dtype=np.int64)
    ys = np.arange(y0, y1 + 1, dtype=np.int64)
    gx = np.repeat(xs, y1 - y0 + 1)
    gy = np.tile(ys, side)
    return field.values(gx, gy).reshape(side, y1 - y0 + 1)


def _to_image(vals_xy):
    """(x, y)-indexed window -> image rows top-down (max y first)."""
    return np.flip(vals_xy.T, axis=0)


def render_rotors(top):
    """Color each site by the rotor on top of its stack (code+1 field)."""
    x0, x1, y0, y1 = _crop_window(top)
    vals = _to_image(_window_values(top, x0, x1, y0, y1))
    rgb = np.empty(vals.shape + (3,), dtype=np.uint8)
    rgb[...] = BACKGROUND
    for code in range(4):
        rgb[vals == code + 1] = ROTOR_COLORS[code]
    return rgb


def render_chips(sigma):
    """Color each site by its chip count (intermediate states land in
    [-1, 3]; anything else is flagged magenta)."""
    x0, x1, y0, y1 = _crop_window(sigma)
    vals = _to_image(_window_values(sigma, x0, x1, y0, y1))
    rgb = np.empty(vals.shape + (3,), dtype=np.uint8)
    rgb[...] = CHIP_OUT_OF_RANGE
    for value, color in CHIP_COLORS.items():
        rgb[vals == value] = color
    return rgb


def render_odo_diff(u, u_approx):
    """Blue where the estimate overshoots the odometer, red where it
    undershoots, white where exact."""
    x0 = min(_crop_window(u)[0], _crop_window(u_approx)[0])
    x1 = max(_crop_window(u)[1], _crop_window(u_approx)[1])
    y0 = min(_crop_window(u)[2], _crop_window(u_approx)[2])
    y1 = max(_crop_window(u)[3], _crop_window(u_approx)[3])
    du = _to_image(_window_values(u_approx, x0, x1, y0, y1)
                   - _window_values(u, x0, x1, y0, y1))
    rgb = np.empty(du.shape + (3,), dtype=np.uint8)
    rgb[...] = 255
    rgb[du > 0] = (0, 0, 255)
    rgb[du < 0] = (255, 0, 0)
    return rgb


def save_sweep_figure(path, table, model, fit=None):
    """Mean radius difference against cluster size, log-x, with error bars
    and the fitted growth line when available.

    ``table`` rows: dicts with n, trials, diff_mean, diff_sd.
    """
    ns = np.array([row["n"] for row in table], dtype=np.float64)
    means = np.array([row["diff_mean"] for row in table])
    sds = np.array([row["diff_sd"] for row in table])
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.errorbar(ns, means, yerr=sds, fmt="o", ms=4, capsize=3,
                label=f"{model} mean ± SD")
    if fit is not None:
        transform, res = fit
        xs = np.geomspace(ns.min(), ns.max(), 200)
        t = np.log(xs) if transform == "log" else np.log(np.log(xs))
        label = (f"{res.slope:.3f}·ln N {res.intercept:+.3f}" if transform == "log"
                 else f"{res.slope:.3f}·ln ln N {res.intercept:+.3f}")
        ax.plot(xs, res.slope * t + res.intercept, "-", lw=1.2,
                label=label + f"  (R²={res.r2:.5f})")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("number of chips N")
    ax.set_ylabel("outradius − inradius")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_moment_figure(path, ms, variances, n):
    """Sample variance of Re(M_m/sqrt(N)) against m, with the 1/(2m+2) law."""
    ms = np.asarray(ms, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(ms, variances, "o", ms=4, label=f"sample variance, N={n}")
    ax.plot(ms, 1.0 / (2 * ms + 2), "-", lw=1.2, label="1/(2m+2)")
    ax.set_xlabel("moment order m")
    ax.set_ylabel("Var Re(M_m/√N)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
