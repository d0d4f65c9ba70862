"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np

_CHUNK = 1 << 20


def bin_sums(bins, values, nbins):
    """Row sums of ``values`` grouped by ``bins`` -> array (nbins, F)."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((nbins, values.shape[1]), dtype=np.float64)
    np.add.at(out, np.asarray(bins, dtype=np.int64), values)
    return out


def enumerate_pair_table(mask_i, mask_j, pos_i, pos_j, m, alpha, q):
    if m > 62:
        raise ValueError("joint set too large to enumerate")
    weights = alpha ** np.arange(m + 1) * (1.0 - alpha) ** (m - np.arange(m + 1))
    out = np.zeros(16, dtype=np.float64)
    mi, mj = np.uint64(mask_i), np.uint64(mask_j)
    total = 1 << m
    for start in range(0, total, _CHUNK):
        a = np.arange(start, min(start + _CHUNK, total), dtype=np.uint64)
        ones = np.bitwise_count(a)
        wi = (a >> np.uint64(pos_i)) & np.uint64(1)
        wj = (a >> np.uint64(pos_j)) & np.uint64(1)
        gi = np.bitwise_count(a & mi) >= q
        gj = np.bitwise_count(a & mj) >= q
        ci = wi.astype(np.int64) + 2 * gi
        cj = wj.astype(np.int64) + 2 * gj
        out += np.bincount(4 * ci + cj, weights=weights[ones], minlength=16)
    return out.reshape(4, 4)
