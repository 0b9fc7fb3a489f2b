"""Independent reference implementations used by tests as oracles."""

import math

import numpy as np


def oracle_render(geom, optics, width, height, pitch, window, step=0.05):
    """Voxel Riemann-sum renderer: per-pixel center ray, midpoint sampling of
    a point-in-solid predicate at the given step along the ray."""
    shell = geom.shell
    xs = window[0] + (np.arange(width) + 0.5 - width / 2) * pitch
    zs = window[1] + (height / 2 - np.arange(height) - 0.5) * pitch
    th = math.radians(shell.rotation)
    c, s = math.cos(th), math.sin(th)
    cx, cy = shell.center
    hx, hy = shell.half_size
    ihx, ihy = shell.inner_half_size
    ys = np.arange(cy - hy * 1.6, cy + hy * 1.6, step) + step / 2
    out = np.zeros((height, width))
    zhigh = np.array([lay.z_high for lay in geom.layers])
    for zi, z in enumerate(zs):
        if z < 0 or z >= shell.height:
            out[zi, :] = 1.0
            continue
        li = min(np.searchsorted(zhigh, z, side="right"), len(geom.layers) - 1)
        struts = geom.layers[li].struts
        slab = z < shell.thickness or z > shell.height - shell.thickness
        for xi, x in enumerate(xs):
            lx = c * (x - cx) + s * (ys - cy)
            ly = -s * (x - cx) + c * (ys - cy)
            in_outer = (np.abs(lx) <= hx) & (np.abs(ly) <= hy)
            if slab:
                solid = in_outer
            else:
                in_inner = (np.abs(lx) <= ihx) & (np.abs(ly) <= ihy)
                solid = in_outer & ~in_inner
                if struts.shape[0]:
                    hit = np.zeros_like(solid)
                    for x0, y0, x1, y1, w in struts:
                        ex, ey = x1 - x0, y1 - y0
                        ln = math.hypot(ex, ey)
                        ux, uy = ex / ln, ey / ln
                        du = (x - x0) * ux + (ys - y0) * uy
                        dv = -(x - x0) * uy + (ys - y0) * ux
                        hit |= (du >= 0) & (du <= ln) & (np.abs(dv) <= w / 2)
                    solid = solid | (in_inner & hit)
            ls = solid.sum() * step
            la = in_outer.sum() * step - ls
            out[zi, xi] = optics.source_intensity * math.exp(
                -optics.mu_solid * ls - optics.mu_air * la)
    return out
