"""Seed geometries for the four planar LJ7 isomers.

All four minima of the 2-D heptamer are fragments of the triangular lattice
with spacing close to the LJ pair minimum 2^(1/6) sigma.  Quenching the
seeds gives the reference energies (in epsilon):

    c0  hexagon                -12.5349
    c1  capped parallelogram 1 -11.5013
    c2  capped parallelogram 2 -11.4769
    c3  trapezoid              -11.4034

c1 and c2 share the same 3+3 parallelogram body and differ only in which
boundary hollow holds the seventh particle; the two placements are not
related by any rigid motion or reflection, hence the distinct energies.
"""

import numpy as np

_A = 2.0 ** (1.0 / 6.0)
_H = _A * np.sqrt(3.0) / 2.0

ISOMER_NAMES = ("c0", "c1", "c2", "c3")


def _centered(points):
    arr = np.array(points, dtype=np.float64)
    return arr - arr.mean(axis=0)


def hexagon():
    """c0: centered hexagon, one particle surrounded by six."""
    pts = [(0.0, 0.0)]
    for k in range(6):
        ang = np.pi * k / 3.0
        pts.append((_A * np.cos(ang), _A * np.sin(ang)))
    return _centered(pts)


def _parallelogram():
    return [(0.0, 0.0), (_A, 0.0), (2.0 * _A, 0.0),
            (0.5 * _A, _H), (1.5 * _A, _H), (2.5 * _A, _H)]


def capped_parallelogram_1():
    """c1: 3+3 parallelogram with the cap over the acute-corner hollow."""
    return _centered(_parallelogram() + [(_A, 2.0 * _H)])


def capped_parallelogram_2():
    """c2: same body, cap over the obtuse-corner hollow."""
    return _centered(_parallelogram() + [(2.0 * _A, 2.0 * _H)])


def trapezoid():
    """c3: rows of four and three."""
    return _centered([(0.0, 0.0), (_A, 0.0), (2.0 * _A, 0.0), (3.0 * _A, 0.0),
                      (0.5 * _A, _H), (1.5 * _A, _H), (2.5 * _A, _H)])


def isomer_seeds():
    """The four seed geometries keyed by name, in energy order."""
    return {"c0": hexagon(),
            "c1": capped_parallelogram_1(),
            "c2": capped_parallelogram_2(),
            "c3": trapezoid()}
