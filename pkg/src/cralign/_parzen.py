"""Block-wise Parzen-window statistics with analytic gradients.

Voxels arrive as flat arrays partitioned into contiguous *blocks*; each block
belongs to one *segment* (a patch, or the whole image). Per-block partial
sums are computed independently, possibly on worker threads, and combined in
block order, so results never depend on the number of threads.
"""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ConstantTargetError

# bins whose total window mass falls below this are skipped
EMPTY_BIN = 1e-12
# target variance below this is treated as constant
MIN_VARIANCE = 1e-12
# cells of the joint histogram at or below this are skipped in MI
EMPTY_CELL = 1e-12


# windows are truncated where they fall below this fraction of their peak
TRUNCATION = 1e-17


class Windows:
    """Banded Gaussian windows of n samples.

    ``omega[i, j]`` is the window of sample ``i`` at bin ``idx[i, j]``;
    ``d[i, j]`` is the offset ``v_i - bin``. Columns that would fall outside
    ``[0, K)`` carry zero weight (their ``idx`` is clipped).
    """

    __slots__ = ("omega", "d", "idx")

    def __init__(self, omega, d, idx):
        self.omega, self.d, self.idx = omega, d, idx

    def bin_sums(self, weights, num_bins):
        """``sum_i weights_i * omega_ik`` for every bin k."""
        return np.bincount(self.idx.ravel(), (weights[:, None] * self.omega).ravel(), minlength=num_bins)

    def project(self, g):
        """``sum_k omega_ik g_k`` for every sample i."""
        return (self.omega * g[self.idx]).sum(axis=1)

    def dense(self, num_bins):
        out = np.zeros((self.omega.shape[0], num_bins))
        np.add.at(out, (np.arange(self.omega.shape[0])[:, None], self.idx), self.omega)
        return out


class Kernel:
    """Gaussian windows centred on ``(k + 0.5) / K`` with width ``h``.

    Only the bins within reach of a sample's window are stored; the
    remainder are below ``TRUNCATION`` times the peak.
    """

    def __init__(self, num_bins, bandwidth_ratio):
        self.num_bins = int(num_bins)
        self.h = float(bandwidth_ratio) / self.num_bins
        self.centers = (np.arange(self.num_bins) + 0.5) / self.num_bins
        self._norm = 1.0 / (self.h * math.sqrt(2.0 * math.pi))
        self._inv2h2 = 0.5 / (self.h * self.h)
        reach = math.ceil(bandwidth_ratio * math.sqrt(-2.0 * math.log(TRUNCATION)) + 0.5)
        if 2 * reach + 1 >= self.num_bins:
            self.offsets = None
        else:
            self.offsets = np.arange(-reach, reach + 1)

    def __call__(self, v):
        K = self.num_bins
        if self.offsets is None:
            idx = np.broadcast_to(np.arange(K), (v.shape[0], K))
            d = v[:, None] - self.centers
            omega = np.exp(-self._inv2h2 * d * d) * self._norm
            return Windows(omega, d, idx)
        nearest = np.clip(np.floor(v * K), 0, K - 1).astype(np.intp)
        idx = nearest[:, None] + self.offsets
        inside = (idx >= 0) & (idx < K)
        idx = np.clip(idx, 0, K - 1)
        d = v[:, None] - (idx + 0.5) / K
        omega = np.exp(-self._inv2h2 * d * d) * self._norm
        omega[~inside] = 0.0
        return Windows(omega, d, idx)

    def derivative(self, win):
        """d omega / d v for every stored window entry."""
        return win.omega * win.d * (-1.0 / (self.h * self.h))


def regular_blocks(n, size):
    starts = np.arange(0, n, size)
    stops = np.minimum(starts + size, n)
    return list(zip(starts.tolist(), stops.tolist()))


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class _Direction:
    """Segment-level quantities of one directed correlation ratio.

    ``b`` is the binned variable and ``t`` the predicted one, i.e. this is
    eta(t | b).
    """

    def __init__(self, S, T, W, Y1, Y2):
        self.S, self.T, self.W, self.Y1, self.Y2 = S, T, W, Y1, Y2
        with np.errstate(divide="ignore", invalid="ignore"):
            self.tbar = Y1 / W
            self.var = Y2 / W - self.tbar * self.tbar
        self.ok = (W > 0) & (self.var >= MIN_VARIANCE)

    def eta(self):
        """eta per segment; NaN where the target is constant."""
        S, T = self.S, self.T
        active = S >= EMPTY_BIN
        Stot = S.sum(axis=1)
        Stot = np.where(Stot > 0, Stot, 1.0)  # empty segments are masked by ``ok``
        ybar_k = np.divide(T, S, out=np.zeros_like(T), where=active)
        dev = np.where(active, ybar_k - self.tbar[:, None], 0.0)
        C = (S * dev * dev).sum(axis=1) / Stot
        self.active, self.Stot, self.ybar_k, self.dev, self.C = active, Stot, ybar_k, dev, C
        with np.errstate(divide="ignore", invalid="ignore"):
            self.value = np.where(self.ok, C / self.var, np.nan)
        return self.value

    def coefficients(self, scale):
        """Derivatives of ``sum_p scale[p] * eta[p]`` w.r.t. the segment sums.

        Returns ``(gS, gT, gW, gY1, gY2)``; entries of segments with zero
        scale are zero.
        """
        scale = np.where(self.ok, scale, 0.0)
        var = np.where(self.ok, self.var, 1.0)
        eta = np.where(self.ok, self.value, 0.0)
        Stot, dev, C, W, tbar = self.Stot, self.dev, self.C, self.W, self.tbar
        W = np.where(W > 0, W, 1.0)
        a = (scale / var)[:, None]
        dC_dT = 2.0 * dev / Stot[:, None]
        dC_dS = np.where(self.active, dev * dev - 2.0 * dev * self.ybar_k, 0.0) / Stot[:, None]
        dC_dS = dC_dS - (C / Stot)[:, None]
        dC_dtbar = -2.0 * (self.S * dev).sum(axis=1) / Stot
        gS = a * dC_dS
        gT = a * dC_dT
        s = scale / var
        gY1 = s * (dC_dtbar / W + eta * 2.0 * tbar / W)
        gY2 = -s * eta / W
        gW = s * (-dC_dtbar * tbar / W - eta * (-self.Y2 / W + 2.0 * tbar * tbar) / W)
        return gS, gT, gW, gY1, gY2


class ParzenEngine:
    """Evaluates Parzen correlation ratio / mutual information losses.

    Parameters
    ----------
    kernel : Kernel
    blocks : list of (start, stop)
        Contiguous voxel ranges covering the arrays.
    segments : array of int
        Segment index of each block.
    threads : int
        Worker threads for block-level work.
    """

    def __init__(self, kernel, blocks, segments=None, threads=1):
        self.kernel = kernel
        self.blocks = list(blocks)
        self.segments = np.zeros(len(self.blocks), dtype=np.intp) if segments is None else np.asarray(segments)
        self.n_seg = int(self.segments.max()) + 1 if len(self.blocks) else 0
        self.threads = max(int(threads), 1)
        self.seg_sizes = np.zeros(self.n_seg)
        for (a, b), s in zip(self.blocks, self.segments):
            self.seg_sizes[s] += b - a

    def kernels(self, v):
        """Per-block window matrices for ``v``; reusable while ``v`` is fixed."""
        return _map(lambda ab: self.kernel(v[ab[0]:ab[1]]), self.blocks, self.threads)

    def _reduce(self, partials):
        """Sum per-block partials into per-segment totals, in block order."""
        out = np.zeros((self.n_seg,) + np.shape(partials[0]))
        for s, p in zip(self.segments, partials):
            out[s] += p
        return out

    # -- correlation ratio ----------------------------------------------

    def cr_directions(self, x, y, w, kx=None, ky=None):
        """Both directed statistics: eta(y|x) and eta(x|y) per segment."""
        K = self.kernel.num_bins
        kx = self.kernels(x) if kx is None else kx
        ky = self.kernels(y) if ky is None else ky

        def partial(i):
            a, b = self.blocks[i]
            xb, yb, wb = x[a:b], y[a:b], w[a:b]
            ox, oy = kx[i], ky[i]
            out = np.empty(4 * K + 5)
            out[0:K] = ox.bin_sums(wb, K)
            out[K:2 * K] = ox.bin_sums(wb * yb, K)
            out[2 * K:3 * K] = oy.bin_sums(wb, K)
            out[3 * K:4 * K] = oy.bin_sums(wb * xb, K)
            out[4 * K] = wb.sum()
            out[4 * K + 1] = (wb * xb).sum()
            out[4 * K + 2] = (wb * xb * xb).sum()
            out[4 * K + 3] = (wb * yb).sum()
            out[4 * K + 4] = (wb * yb * yb).sum()
            return out

        tot = self._reduce(_map(partial, range(len(self.blocks)), self.threads))
        W = tot[:, 4 * K]
        yx = _Direction(tot[:, 0:K], tot[:, K:2 * K], W, tot[:, 4 * K + 3], tot[:, 4 * K + 4])
        xy = _Direction(tot[:, 2 * K:3 * K], tot[:, 3 * K:4 * K], W, tot[:, 4 * K + 1], tot[:, 4 * K + 2])
        yx.eta()
        xy.eta()
        return yx, xy, kx, ky

    def cr_gradient(self, x, y, w, yx, xy, scale, kx, ky, need_y=True):
        """Per-voxel derivatives of ``sum_p scale[p] * (eta_yx[p] + eta_xy[p])``.

        Returns ``(d_x, d_y, d_w)`` as flat arrays; ``d_y`` is None unless
        ``need_y``.
        """
        c_yx = yx.coefficients(scale)
        c_xy = xy.coefficients(scale)
        n = x.shape[0]
        gx, gw = np.empty(n), np.empty(n)
        gy = np.empty(n) if need_y else None
        kernel = self.kernel

        def one(i):
            a, b = self.blocks[i]
            s = self.segments[i]
            xb, yb, wb = x[a:b], y[a:b], w[a:b]
            ox, oy = kx[i], ky[i]
            gS, gT, gW, gY1, gY2 = (c[s] for c in c_yx)
            hS, hT, hW, hX1, hX2 = (c[s] for c in c_xy)
            # eta(y|x): x binned, y predicted
            ox_d = kernel.derivative(ox)
            gS_i, gT_i = gS[ox.idx], gT[ox.idx]
            A = (ox.omega * gS_i).sum(axis=1)
            B = (ox.omega * gT_i).sum(axis=1)
            Ad = (ox_d * gS_i).sum(axis=1)
            Bd = (ox_d * gT_i).sum(axis=1)
            # eta(x|y): y binned, x predicted
            hS_i, hT_i = hS[oy.idx], hT[oy.idx]
            P = (oy.omega * hS_i).sum(axis=1)
            Q = (oy.omega * hT_i).sum(axis=1)
            gw[a:b] = (A + B * yb + gW + gY1 * yb + gY2 * yb * yb) + (P + Q * xb + hW + hX1 * xb + hX2 * xb * xb)
            gx[a:b] = wb * (Ad + Bd * yb) + wb * (Q + hX1 + 2.0 * hX2 * xb)
            if need_y:
                oy_d = kernel.derivative(oy)
                Pd = (oy_d * hS_i).sum(axis=1)
                Qd = (oy_d * hT_i).sum(axis=1)
                gy[a:b] = wb * (B + gY1 + 2.0 * gY2 * yb) + wb * (Pd + Qd * xb)

        _map(one, range(len(self.blocks)), self.threads)
        return gx, gy, gw

    # -- mutual information ---------------------------------------------

    def joint(self, x, y, w, kx=None, ky=None):
        """Joint Parzen histogram per segment, symmetric under swapping x, y."""
        kx = self.kernels(x) if kx is None else kx
        ky = self.kernels(y) if ky is None else ky

        def partial(i):
            a, b = self.blocks[i]
            r = np.sqrt(w[a:b])[:, None]
            K = self.kernel.num_bins
            ax = r * kx[i].dense(K)
            ay = r * ky[i].dense(K)
            return np.stack([ax.T @ ay, ay.T @ ax])

        tot = self._reduce(_map(partial, range(len(self.blocks)), self.threads))
        J = 0.5 * (tot[:, 0] + np.transpose(tot[:, 1], (0, 2, 1)))
        return J, kx, ky

    @staticmethod
    def mutual_information(J):
        """MI (natural log) of each K x K joint histogram in ``J`` (nseg, K, K).

        Also returns the derivative of MI with respect to ``J``.
        """
        Jsym = J + np.transpose(J, (0, 2, 1))
        Z = 0.5 * Jsym.sum(axis=(1, 2))
        P = J / Z[:, None, None]
        px = np.ascontiguousarray(P).sum(axis=2)
        py = np.ascontiguousarray(np.transpose(P, (0, 2, 1))).sum(axis=2)
        active = P > EMPTY_CELL
        denom = px[:, :, None] * py[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            L = np.where(active, np.log(P) - np.log(denom), 0.0)
        T = np.where(active, P * L, 0.0)
        mi = 0.5 * (T + np.transpose(T, (0, 2, 1))).sum(axis=(1, 2))
        # d MI / d P, treating px, py as functions of P
        Pa = np.where(active, P, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            row = np.where(px > 0, Pa.sum(axis=2) / px, 0.0)
            col = np.where(py > 0, Pa.sum(axis=1) / py, 0.0)
        D = np.where(active, L + 1.0, 0.0) - row[:, :, None] - col[:, None, :]
        E = (D - (P * D).sum(axis=(1, 2))[:, None, None]) / Z[:, None, None]
        return mi, E

    def mi_gradient(self, x, y, w, E, scale, kx, ky, need_y=True):
        """Per-voxel derivatives of ``sum_p scale[p] * MI[p]`` given dMI/dJ."""
        n = x.shape[0]
        gx, gw = np.empty(n), np.empty(n)
        gy = np.empty(n) if need_y else None
        kernel = self.kernel

        def one(i):
            a, b = self.blocks[i]
            s = self.segments[i]
            Es = scale[s] * E[s]
            ox, oy = kx[i], ky[i]
            wb = w[a:b]
            rows = np.arange(b - a)[:, None]
            # (E b_i)_k restricted to the bins stored for x_i
            bE = (oy.dense(self.kernel.num_bins) @ Es.T)[rows, ox.idx]
            gw[a:b] = (ox.omega * bE).sum(axis=1)
            gx[a:b] = wb * (kernel.derivative(ox) * bE).sum(axis=1)
            if need_y:
                aE = (ox.dense(self.kernel.num_bins) @ Es)[rows, oy.idx]
                gy[a:b] = wb * (aE * kernel.derivative(oy)).sum(axis=1)

        _map(one, range(len(self.blocks)), self.threads)
        return gx, gy, gw


def check_targets(yx, xy, seg=0):
    if not (yx.ok[seg] and xy.ok[seg]):
        raise ConstantTargetError("correlation ratio is undefined for a constant image")
