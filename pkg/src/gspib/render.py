"""Deterministic SVG and CSV emission for FES grids, timeseries, dF tables.

Everything here is plain string assembly with fixed float formatting: the
same input produces byte-identical files on every run, which keeps the
pipeline manifests verifiable.  Contour lines come from a marching-squares
pass over the binned surface; masked (unsampled) bins are skipped, never
zero-filled.
"""

import numpy as np

NA = "NA"

# four-anchor map, dark at low free energy
_CMAP = np.array([
    [0.267, 0.005, 0.329],
    [0.190, 0.407, 0.556],
    [0.208, 0.718, 0.473],
    [0.993, 0.906, 0.144],
])


def _fmt(x):
    return "%.6g" % float(x)


def _color(u):
    """Map u in [0, 1] to a #rrggbb string via the anchor table."""
    u = min(max(float(u), 0.0), 1.0)
    pos = u * (len(_CMAP) - 1)
    i = min(int(pos), len(_CMAP) - 2)
    frac = pos - i
    rgb = (1.0 - frac) * _CMAP[i] + frac * _CMAP[i + 1]
    return "#%02x%02x%02x" % tuple(int(round(255 * c)) for c in rgb)


def fes_to_csv(fes, path):
    """One row per bin: center coordinates and free energy, NA when masked."""
    centers = fes.centers
    with open(path, "w") as fh:
        fh.write(",".join(fes.names) + ",free_energy\n")
        if len(centers) == 1:
            for i, x in enumerate(centers[0]):
                val = NA if fes.mask[i] else _fmt(fes.values[i])
                fh.write(f"{_fmt(x)},{val}\n")
        else:
            for i, x in enumerate(centers[0]):
                for j, y in enumerate(centers[1]):
                    val = NA if fes.mask[i, j] else _fmt(fes.values[i, j])
                    fh.write(f"{_fmt(x)},{_fmt(y)},{val}\n")


def timeseries_to_csv(steps, values, names, path):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == len(steps) and values.shape[1] == len(names):
        values = values.T
    with open(path, "w") as fh:
        fh.write("step," + ",".join(names) + "\n")
        for i, s in enumerate(steps):
            row = [str(int(s))]
            for c in range(len(names)):
                v = values[c, i]
                row.append(NA if np.isnan(v) else _fmt(v))
            fh.write(",".join(row) + "\n")


def _marching_squares(x, y, z, level):
    """Contour segments of z(x, y) = level; cells with NaN corners skipped.

    x, y are bin-center coordinates, z is (len(x), len(y)).  Returns a list
    of ((x0, y0), (x1, y1)) segments in data coordinates.
    """
    segs = []
    nx, ny = z.shape

    def interp(pa, va, pb, vb):
        t = (level - va) / (vb - va)
        return (pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1]))

    for i in range(nx - 1):
        for j in range(ny - 1):
            corners = [((x[i], y[j]), z[i, j]),
                       ((x[i + 1], y[j]), z[i + 1, j]),
                       ((x[i + 1], y[j + 1]), z[i + 1, j + 1]),
                       ((x[i], y[j + 1]), z[i, j + 1])]
            vals = [c[1] for c in corners]
            if any(np.isnan(v) for v in vals):
                continue
            case = sum((1 << k) for k, v in enumerate(vals) if v >= level)
            if case in (0, 15):
                continue
            # crossing points on the four edges (0-1, 1-2, 2-3, 3-0)
            pts = {}
            edges = [(0, 1), (1, 2), (2, 3), (3, 0)]
            for e, (a, b) in enumerate(edges):
                va, vb = vals[a], vals[b]
                if (va >= level) != (vb >= level):
                    pts[e] = interp(corners[a][0], va, corners[b][0], vb)
            table = {1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)],
                     5: [(3, 2), (0, 1)], 6: [(0, 2)], 7: [(3, 2)],
                     8: [(2, 3)], 9: [(0, 2)], 10: [(0, 3), (1, 2)],
                     11: [(1, 2)], 12: [(1, 3)], 13: [(0, 1)],
                     14: [(0, 3)]}
            for ea, eb in table[case]:
                segs.append((pts[ea], pts[eb]))
    return segs


def render_fes_svg(fes, path, levels=None, width=640, height=560):
    """Heatmap plus contour lines; masked bins are left unpainted.

    Default contour levels run 0 to 10 in steps of 2 energy units.
    """
    if len(fes.edges) != 2:
        raise ValueError("SVG heatmap needs a 2-d FES grid")
    if levels is None:
        levels = np.arange(0.0, 10.0 + 1e-9, 2.0)
    ex, ey = fes.edges
    if ex[-1] <= ex[0] or ey[-1] <= ey[0]:
        raise ValueError("degenerate axis range")
    ml, mr, mt, mb = 64, 20, 16, 48
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + pw * (x - ex[0]) / (ex[-1] - ex[0])

    def sy(y):
        return mt + ph * (ey[-1] - y) / (ey[-1] - ey[0])

    sampled = fes.values[~fes.mask]
    vmax = sampled.max() if sampled.size else 1.0
    vmax = max(vmax, 1e-12)

    out = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
               f'height="{height}" viewBox="0 0 {width} {height}">')
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" '
               'fill="white"/>')
    nx, ny = fes.values.shape
    for i in range(nx):
        for j in range(ny):
            if fes.mask[i, j]:
                continue
            x0, x1 = sx(ex[i]), sx(ex[i + 1])
            y0, y1 = sy(ey[j + 1]), sy(ey[j])
            col = _color(fes.values[i, j] / vmax)
            out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" '
                       f'width="{_fmt(x1 - x0)}" height="{_fmt(y1 - y0)}" '
                       f'fill="{col}"/>')
    cx, cy = fes.centers
    for level in levels:
        for (xa, ya), (xb, yb) in _marching_squares(cx, cy, fes.values,
                                                    level):
            out.append(f'<line x1="{_fmt(sx(xa))}" y1="{_fmt(sy(ya))}" '
                       f'x2="{_fmt(sx(xb))}" y2="{_fmt(sy(yb))}" '
                       'stroke="white" stroke-width="1"/>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
               'fill="none" stroke="black"/>')
    for val, anchor, xpos, ypos in (
            (ex[0], "middle", sx(ex[0]), height - mb + 16),
            (ex[-1], "middle", sx(ex[-1]), height - mb + 16),
            (ey[0], "end", ml - 6, sy(ey[0]) + 4),
            (ey[-1], "end", ml - 6, sy(ey[-1]) + 4)):
        out.append(f'<text x="{_fmt(xpos)}" y="{_fmt(ypos)}" '
                   f'text-anchor="{anchor}" font-size="12" '
                   f'font-family="monospace">{_fmt(val)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" '
               'text-anchor="middle" font-size="13" '
               f'font-family="monospace">{fes.names[0]}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               'font-size="13" font-family="monospace" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">'
               f'{fes.names[1]}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def render_timeseries_svg(steps, values, names, path, width=720, height=240):
    """Line plot of one or more series over steps; NaN breaks the line."""
    steps = np.asarray(steps, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == len(steps) and values.shape[1] == len(names):
        values = values.T
    if values.shape != (len(names), len(steps)):
        raise ValueError("values must be (n_series, n_steps)")
    if len(steps) < 2:
        raise ValueError("need at least two points")
    ml, mr, mt, mb = 60, 16, 14, 34
    pw, ph = width - ml - mr, height - mt - mb
    lo = np.nanmin(values)
    hi = np.nanmax(values)
    if not np.isfinite(lo) or hi <= lo:
        hi, lo = lo + 1.0, lo - 1.0
    s0, s1 = steps[0], steps[-1]
    if s1 <= s0:
        raise ValueError("degenerate step range")
    palette = ("#31688e", "#b8413e", "#35b779", "#8c6bb1")

    def sx(s):
        return ml + pw * (s - s0) / (s1 - s0)

    def sy(v):
        return mt + ph * (hi - v) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" '
           'fill="white"/>']
    for c, name in enumerate(names):
        col = palette[c % len(palette)]
        pieces = []
        run = []
        for i in range(len(steps)):
            v = values[c, i]
            if np.isnan(v):
                if len(run) > 1:
                    pieces.append(run)
                run = []
                continue
            run.append((sx(steps[i]), sy(v)))
        if len(run) > 1:
            pieces.append(run)
        for run in pieces:
            d = "M " + " L ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in run)
            out.append(f'<path d="{d}" fill="none" stroke="{col}" '
                       'stroke-width="1.2"/>')
        out.append(f'<text x="{ml + 8 + 90 * c}" y="{mt + 14}" '
                   f'font-size="12" font-family="monospace" '
                   f'fill="{col}">{name}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
               'fill="none" stroke="black"/>')
    for val, xpos, ypos, anchor in ((lo, ml - 6, sy(lo) + 4, "end"),
                                    (hi, ml - 6, sy(hi) + 4, "end"),
                                    (s0, sx(s0), height - mb + 16, "middle"),
                                    (s1, sx(s1), height - mb + 16, "middle")):
        out.append(f'<text x="{_fmt(xpos)}" y="{_fmt(ypos)}" '
                   f'text-anchor="{anchor}" font-size="11" '
                   f'font-family="monospace">{_fmt(val)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def render_deltaf_svg(tables, path, width=520, height=300):
    """Grouped interval plot of dF tables from several methods.

    ``tables`` maps method name -> list of DeltaFRow; states sit on the x
    axis, each method slightly offset, 95% CIs as vertical bars.  States a
    method never sampled are simply absent from its column.
    """
    methods = list(tables)
    if not methods:
        raise ValueError("no tables to draw")
    states = [r.name for r in tables[methods[0]]]
    finite = [r for rows in tables.values() for r in rows
              if np.isfinite(r.delta_f) and np.isfinite(r.ci_low)]
    if not finite:
        raise ValueError("no finite dF entries")
    lo = min(min(r.ci_low for r in finite), 0.0)
    hi = max(r.ci_high for r in finite)
    pad = 0.08 * (hi - lo + 1e-12)
    lo, hi = lo - pad, hi + pad
    ml, mr, mt, mb = 64, 16, 18, 40
    pw, ph = width - ml - mr, height - mt - mb
    palette = ("#31688e", "#b8413e", "#35b779", "#8c6bb1")

    def sx(si, mi):
        group = ml + pw * (si + 0.5) / len(states)
        return group + 14.0 * (mi - (len(methods) - 1) / 2.0)

    def sy(v):
        return mt + ph * (hi - v) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" '
           'fill="white"/>',
           f'<line x1="{ml}" y1="{_fmt(sy(0.0))}" x2="{ml + pw}" '
           f'y2="{_fmt(sy(0.0))}" stroke="#bbbbbb" stroke-width="1"/>']
    for mi, method in enumerate(methods):
        col = palette[mi % len(palette)]
        for si, row in enumerate(tables[method]):
            if not np.isfinite(row.delta_f):
                continue
            x = sx(si, mi)
            if np.isfinite(row.ci_low):
                out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(sy(row.ci_low))}"'
                           f' x2="{_fmt(x)}" y2="{_fmt(sy(row.ci_high))}" '
                           f'stroke="{col}" stroke-width="2"/>')
            out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(sy(row.delta_f))}" '
                       f'r="3.5" fill="{col}"/>')
        out.append(f'<text x="{ml + 8 + 120 * mi}" y="{mt - 4}" '
                   f'font-size="12" font-family="monospace" fill="{col}">'
                   f'{method}</text>')
    for si, name in enumerate(states):
        x = ml + pw * (si + 0.5) / len(states)
        out.append(f'<text x="{_fmt(x)}" y="{height - mb + 18}" '
                   'text-anchor="middle" font-size="12" '
                   f'font-family="monospace">{name}</text>')
    for val in (lo + pad, hi - pad):
        out.append(f'<text x="{ml - 6}" y="{_fmt(sy(val) + 4)}" '
                   'text-anchor="end" font-size="11" '
                   f'font-family="monospace">{_fmt(val)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
               'fill="none" stroke="black"/>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
