"""Compiled per-epoch energy evaluation for the optimizer's inner loop.

``fused_energy`` places the samples of every foreground ray of a group,
looks them up in every camera and accumulates the energy and its gradient
in one pass, without materializing the ``(samples, cameras, 4)`` lookup
arrays. It computes exactly what ``sample_rays`` followed by ``energy``
computes (up to floating-point summation order) and is checked against that
reference in the test suite. Only the median photo prior is compiled; other
priors go through the reference path.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _median(buf, count, lower):
    # insertion sort of the first ``count`` entries
    for i in range(1, count):
        x = buf[i]
        j = i - 1
        while j >= 0 and buf[j] > x:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = x
    lo = (count - 1) // 2
    if lower or count % 2 == 1:
        return buf[lo]
    return 0.5 * (buf[lo] + buf[count // 2])


@numba.njit(cache=True, nogil=True)
def _fused(
    R, T, intr, centers, depth, image, mask, dirs, fg_start, fg_pix, offset, unit, eps_floor,
    sigma_d, gamma_d, sigma_c, gamma_c, lower_median, grads, H, W,
):
    # depth, mask, grads are (n, H*W); image is (n, H*W, 3)
    n = R.shape[0]
    E = 0.0
    clamped = 0
    s = np.empty(n)
    valid = np.zeros(n, dtype=np.bool_)
    col = np.empty((n, 3))
    cidx = np.empty((n, 4), dtype=np.int64)
    cw = np.empty((n, 4))
    buf = np.empty(n)
    kern = np.empty(n)
    for k in range(n):
        ck = centers[k]
        for q in range(fg_start[k], fg_start[k + 1]):
            p = fg_pix[q]
            d = depth[k, p]
            lo = d - offset
            hi = d + offset
            if lo <= 0.0:
                lo = eps_floor
                clamped += 1
            for a in range(unit.shape[0]):
                t = lo + (hi - lo) * (unit[a] + 1.0) / 2.0
                X0 = ck[0] + t * dirs[q, 0]
                X1 = ck[1] + t * dirs[q, 1]
                X2 = ck[2] + t * dirs[q, 2]
                for m in range(n):
                    if m == k:
                        valid[m] = True
                        s[m] = d - t
                        cidx[m, 0] = p
                        cw[m, 0] = 1.0
                        cw[m, 1] = 0.0
                        cw[m, 2] = 0.0
                        cw[m, 3] = 0.0
                        for c in range(3):
                            col[m, c] = image[k, p, c]
                        continue
                    Rm = R[m]
                    x = Rm[0, 0] * X0 + Rm[0, 1] * X1 + Rm[0, 2] * X2 + T[m, 0]
                    y = Rm[1, 0] * X0 + Rm[1, 1] * X1 + Rm[1, 2] * X2 + T[m, 1]
                    z = Rm[2, 0] * X0 + Rm[2, 1] * X1 + Rm[2, 2] * X2 + T[m, 2]
                    valid[m] = False
                    if not z > 0.0:
                        continue
                    u = intr[m, 0] * x / z + intr[m, 2]
                    v = intr[m, 1] * y / z + intr[m, 3]
                    if not (u >= 0.0 and u <= W - 1 and v >= 0.0 and v <= H - 1):
                        continue
                    x0 = min(max(np.floor(u), 0.0), max(W - 2, 0))
                    y0 = min(max(np.floor(v), 0.0), max(H - 2, 0))
                    ax = u - x0
                    ay = v - y0
                    ix0 = int(x0)
                    iy0 = int(y0)
                    ix1 = min(ix0 + 1, W - 1)
                    iy1 = min(iy0 + 1, H - 1)
                    cidx[m, 0] = iy0 * W + ix0
                    cidx[m, 1] = iy0 * W + ix1
                    cidx[m, 2] = iy1 * W + ix0
                    cidx[m, 3] = iy1 * W + ix1
                    cw[m, 0] = (1 - ax) * (1 - ay)
                    cw[m, 1] = ax * (1 - ay)
                    cw[m, 2] = (1 - ax) * ay
                    cw[m, 3] = ax * ay
                    ok = True
                    for c in range(4):
                        if cw[m, c] != 0.0 and not mask[m, cidx[m, c]]:
                            ok = False
                    if not ok:
                        continue
                    valid[m] = True
                    D = 0.0
                    for c in range(4):
                        wc = cw[m, c]
                        if wc != 0.0:
                            D += wc * depth[m, cidx[m, c]]
                    s[m] = D - np.sqrt(x * x + y * y + z * z)
                    for ch in range(3):
                        acc = 0.0
                        for c in range(4):
                            acc += cw[m, c] * image[m, cidx[m, c], ch]
                        col[m, ch] = acc
                # photo-consistency: median over valid cameras, per channel
                count = 0
                for m in range(n):
                    if valid[m]:
                        count += 1
                med0 = 0.0
                med1 = 0.0
                med2 = 0.0
                for ch in range(3):
                    j = 0
                    for m in range(n):
                        if valid[m]:
                            buf[j] = col[m, ch]
                            j += 1
                    md = _median(buf, count, lower_median)
                    if ch == 0:
                        med0 = md
                    elif ch == 1:
                        med1 = md
                    else:
                        med2 = md
                photo = 1.0
                value = 1.0
                for m in range(n):
                    if valid[m]:
                        r0 = col[m, 0] - med0
                        r1 = col[m, 1] - med1
                        r2 = col[m, 2] - med2
                        photo *= np.exp(-(r0 * r0 + r1 * r1 + r2 * r2) / sigma_c) + gamma_c
                        kern[m] = np.exp(-(s[m] * s[m]) / sigma_d)
                        value *= kern[m] + gamma_d
                    else:
                        photo *= gamma_c
                        value *= gamma_d
                E += value * photo
                for m in range(n):
                    if not valid[m]:
                        continue
                    g = photo * (value / (kern[m] + gamma_d)) * (-2.0 * s[m] / sigma_d) * kern[m]
                    for c in range(4):
                        wc = cw[m, c]
                        if wc != 0.0:
                            grads[m, cidx[m, c]] += wc * g
    return E, clamped


def fused_energy(rig, group, offset: float, samples_per_ray: int, params):
    """Energy and per-camera gradients of a freshly sampled batch for ``group``.

    Returns ``(E, grads, clamped)``; ``grads[k]`` is ``(H, W)`` and zero on the
    background.
    """
    cams = [rig.cameras[j] for j in group.cameras]
    H, W = cams[0].shape
    if any(c.shape != (H, W) for c in cams):
        raise ValueError("fused path needs equal image sizes within a group")
    n = len(cams)
    R = np.ascontiguousarray([c.rotation for c in cams], dtype=np.float64)
    T = np.ascontiguousarray([c.translation for c in cams], dtype=np.float64)
    intr = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cams], dtype=np.float64)
    centers = np.ascontiguousarray([c.center for c in cams], dtype=np.float64)
    depth = np.ascontiguousarray([np.nan_to_num(c.depth, nan=0.0).reshape(-1) for c in cams], dtype=np.float64)
    image = np.ascontiguousarray([c.image.reshape(-1, 3) for c in cams], dtype=np.float64)
    mask = np.ascontiguousarray([c.mask.reshape(-1) for c in cams], dtype=np.bool_)
    fg = [np.flatnonzero(c.mask) for c in cams]
    fg_start = np.zeros(n + 1, dtype=np.int64)
    fg_start[1:] = np.cumsum([len(f) for f in fg])
    fg_pix = np.concatenate(fg).astype(np.int64)
    dirs = np.concatenate([c.ray_directions(*np.divmod(f, W)) for c, f in zip(cams, fg)])
    grads = np.zeros((n, H * W))
    E, clamped = _fused(
        R, T, intr, centers, depth, image, mask, np.ascontiguousarray(dirs), fg_start, fg_pix,
        float(offset), np.linspace(-1.0, 1.0, int(samples_per_ray)), 1e-4 * rig.diameter,
        params.sigma_d, params.gamma_srdf, params.sigma_c, params.gamma_phi, params.even_median == "lower", grads, H, W,
    )
    out = [np.where(c.mask, grads[k].reshape(H, W), 0.0) for k, c in enumerate(cams)]
    return float(E), out, int(clamped)


@numba.njit(cache=True, nogil=True)
def _tsdf(origin, vs, R, T, intr, depth, mask, W, H, trunc, quantum, carve, sdf_sum, weight):
    nx, ny, nz = sdf_sum.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                X0 = origin[0] + (i + 0.5) * vs
                X1 = origin[1] + (j + 0.5) * vs
                X2 = origin[2] + (k + 0.5) * vs
                x = R[0, 0] * X0 + R[0, 1] * X1 + R[0, 2] * X2 + T[0]
                y = R[1, 0] * X0 + R[1, 1] * X1 + R[1, 2] * X2 + T[1]
                z = R[2, 0] * X0 + R[2, 1] * X1 + R[2, 2] * X2 + T[2]
                if not z > 0.0:
                    continue
                u = intr[0] * x / z + intr[2]
                v = intr[1] * y / z + intr[3]
                if not (u >= 0.0 and u <= W - 1 and v >= 0.0 and v <= H - 1):
                    continue
                x0 = min(max(np.floor(u), 0.0), max(W - 2, 0))
                y0 = min(max(np.floor(v), 0.0), max(H - 2, 0))
                ax = u - x0
                ay = v - y0
                ix0 = int(x0)
                iy0 = int(y0)
                ix1 = min(ix0 + 1, W - 1)
                iy1 = min(iy0 + 1, H - 1)
                p0 = iy0 * W + ix0
                p1 = iy0 * W + ix1
                p2 = iy1 * W + ix0
                p3 = iy1 * W + ix1
                w0 = (1 - ax) * (1 - ay)
                w1 = ax * (1 - ay)
                w2 = (1 - ax) * ay
                w3 = ax * ay
                ok = (w0 == 0.0 or mask[p0]) and (w1 == 0.0 or mask[p1]) and (w2 == 0.0 or mask[p2]) and (w3 == 0.0 or mask[p3])
                if ok:
                    D = w0 * depth[p0] + w1 * depth[p1] + w2 * depth[p2] + w3 * depth[p3]
                    d = D - np.sqrt(x * x + y * y + z * z)
                    if d > -trunc:
                        d = min(max(d, -trunc), trunc)
                        sdf_sum[i, j, k] += np.int64(np.rint(d / quantum))
                        weight[i, j, k] += 1
                elif carve and not (mask[p0] or mask[p1] or mask[p2] or mask[p3]):
                    sdf_sum[i, j, k] += np.int64(np.rint(trunc / quantum))
                    weight[i, j, k] += 1


def tsdf_accumulate(volume, camera, carve_background: bool) -> None:
    _tsdf(
        np.asarray(volume.origin, dtype=np.float64), float(volume.voxel_size),
        np.ascontiguousarray(camera.rotation), np.ascontiguousarray(camera.translation),
        np.array([camera.fx, camera.fy, camera.cx, camera.cy], dtype=np.float64),
        np.ascontiguousarray(np.nan_to_num(camera.depth, nan=0.0).reshape(-1)),
        np.ascontiguousarray(camera.mask.reshape(-1)), camera.width, camera.height,
        float(volume.trunc), float(volume.quantum), bool(carve_background), volume.sdf_sum, volume.weight,
    )
