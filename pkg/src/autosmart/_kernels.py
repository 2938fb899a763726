"""Compiled inner loops.

Parallel loops run over features (histograms, split search) or rows
(prediction); every output slot is written by exactly one iteration, so
results do not depend on the thread count.
"""

import os

# the bundled TBB is often too old; the portable pool is deterministic anyway
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np  # noqa: E402
from numba import njit, prange  # noqa: E402

# ---------------------------------------------------------------------------
# GBDT


@njit(parallel=True, cache=True)
def build_histograms(binned, rows, start, end, g, h, feats, out):
    """out[f, b] = (sum g, sum h, count) over rows[start:end] with bin b."""
    n_bins = out.shape[1]
    for k in prange(len(feats)):
        f = feats[k]
        for b in range(n_bins):
            out[f, b, 0] = 0.0
            out[f, b, 1] = 0.0
            out[f, b, 2] = 0.0
        col = binned[f]
        for i in range(start, end):
            r = rows[i]
            b = col[r]
            out[f, b, 0] += g[r]
            out[f, b, 1] += h[r]
            out[f, b, 2] += 1.0


@njit(parallel=True, cache=True)
def subtract_histograms(parent, child, feats, out):
    for k in prange(len(feats)):
        f = feats[k]
        for b in range(parent.shape[1]):
            for c in range(3):
                out[f, b, c] = parent[f, b, c] - child[f, b, c]


@njit(parallel=True, cache=True)
def best_split_per_feature(hist, feats, n_value_bins, missing_bin, g_tot, h_tot, c_tot,
                           lam, min_child_weight, min_child_samples,
                           out_gain, out_bin, out_mleft):
    """Scan thresholds of every feature; left side holds bins <= threshold.

    Missing rows are tried on the right first, then on the left; a strictly
    larger gain is needed to replace the incumbent, so ties keep the lowest
    bin with missing routed right.
    """
    parent = g_tot * g_tot / (h_tot + lam)
    min_c = max(min_child_samples, 1.0)
    for k in prange(len(feats)):
        f = feats[k]
        mg = hist[f, missing_bin, 0]
        mh = hist[f, missing_bin, 1]
        mc = hist[f, missing_bin, 2]
        best = -np.inf
        best_b = -1
        best_ml = False
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for b in range(n_value_bins[f]):
            gl += hist[f, b, 0]
            hl += hist[f, b, 1]
            cl += hist[f, b, 2]
            for opt in range(2):
                if opt == 1 and mc == 0.0:
                    break
                if opt == 0:
                    lg, lh, lc = gl, hl, cl
                else:
                    lg, lh, lc = gl + mg, hl + mh, cl + mc
                rg = g_tot - lg
                rh = h_tot - lh
                rc = c_tot - lc
                if lc < min_c or rc < min_c:
                    continue
                if lh < min_child_weight or rh < min_child_weight:
                    continue
                gain = 0.5 * (lg * lg / (lh + lam) + rg * rg / (rh + lam) - parent)
                if gain > best:
                    best = gain
                    best_b = b
                    best_ml = opt == 1
        out_gain[k] = best
        out_bin[k] = best_b
        out_mleft[k] = best_ml


@njit(cache=True)
def partition_rows(rows, start, end, col, threshold, missing_left, missing_bin, scratch):
    """Stable in-place partition of rows[start:end]; returns the split point."""
    nl = 0
    nr = 0
    for i in range(start, end):
        r = rows[i]
        b = col[r]
        if b == missing_bin:
            left = missing_left
        else:
            left = b <= threshold
        if left:
            rows[start + nl] = r
            nl += 1
        else:
            scratch[nr] = r
            nr += 1
    for j in range(nr):
        rows[start + nl + j] = scratch[j]
    return start + nl


@njit(cache=True)
def add_leaf_values(rows, starts, ends, values, scale, raw):
    for k in range(len(starts)):
        v = scale * values[k]
        for i in range(starts[k], ends[k]):
            raw[rows[i]] += v


@njit(parallel=True, cache=True)
def predict_forest(binned, roots, scales, feature, threshold, missing_left, left, right,
                   value, missing_bin, out):
    """out[i] += sum_t scales[t] * tree_t(row i) over concatenated node arrays."""
    n = binned.shape[1]
    for i in prange(n):
        acc = 0.0
        for t in range(len(roots)):
            node = roots[t]
            while feature[node] >= 0:
                b = binned[feature[node], i]
                if b == missing_bin:
                    go_left = missing_left[node]
                else:
                    go_left = b <= threshold[node]
                node = left[node] if go_left else right[node]
            acc += scales[t] * value[node]
        out[i] += acc


# ---------------------------------------------------------------------------
# feature engineering


@njit(cache=True)
def list_position(needle, needle_missing, values, offsets, list_missing):
    """1-based position of each row's needle inside the row's list, 0 if absent.

    Rows where either side is missing get -1.
    """
    n = len(needle)
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        if needle_missing[i] or list_missing[i]:
            out[i] = -1
            continue
        pos = 0
        x = needle[i]
        for j in range(offsets[i], offsets[i + 1]):
            if values[j] == x:
                pos = j - offsets[i] + 1
                break
        out[i] = pos
    return out


@njit(cache=True)
def list_means(values, offsets):
    n = len(offsets) - 1
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        a = offsets[i]
        b = offsets[i + 1]
        if b == a:
            out[i] = np.nan
            continue
        s = 0.0
        for j in range(a, b):
            s += values[j]
        out[i] = s / (b - a)
    return out
