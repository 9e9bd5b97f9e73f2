"""Compiled LSTM recurrences (forward and backpropagation through time).

Gate layout along the last axis: input, forget, cell, output.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


@numba.njit(cache=True)
def lstm_forward(pre, w_hh, reverse):
    nb, nt, four_h = pre.shape
    hid = four_h // 4
    gates = np.empty_like(pre)
    cells = np.empty((nb, nt, hid), dtype=pre.dtype)
    tcells = np.empty((nb, nt, hid), dtype=pre.dtype)
    hs = np.empty((nb, nt, hid), dtype=pre.dtype)
    h = np.zeros(hid, dtype=pre.dtype)
    c = np.zeros(hid, dtype=pre.dtype)
    z = np.empty(four_h, dtype=pre.dtype)
    for b in range(nb):
        h[:] = 0.0
        c[:] = 0.0
        for k in range(nt):
            t = nt - 1 - k if reverse else k
            for j in range(four_h):
                acc = pre[b, t, j]
                for m in range(hid):
                    acc += h[m] * w_hh[m, j]
                z[j] = acc
            for m in range(hid):
                i = _sig(z[m])
                f = _sig(z[hid + m])
                g = np.tanh(z[2 * hid + m])
                o = _sig(z[3 * hid + m])
                gates[b, t, m] = i
                gates[b, t, hid + m] = f
                gates[b, t, 2 * hid + m] = g
                gates[b, t, 3 * hid + m] = o
                c[m] = f * c[m] + i * g
                tc = np.tanh(c[m])
                h[m] = o * tc
                cells[b, t, m] = c[m]
                tcells[b, t, m] = tc
                hs[b, t, m] = h[m]
    return gates, cells, tcells, hs


@numba.njit(cache=True)
def lstm_backward(dh, gates, cells, tcells, hs, w_hh, reverse):
    nb, nt, four_h = gates.shape
    hid = four_h // 4
    dpre = np.empty_like(gates)
    dwhh = np.zeros_like(w_hh)
    dh_next = np.zeros(hid, dtype=gates.dtype)
    dc_next = np.zeros(hid, dtype=gates.dtype)
    for b in range(nb):
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for k in range(nt - 1, -1, -1):
            t = nt - 1 - k if reverse else k
            has_prev = k > 0
            prev = (nt - k if reverse else k - 1) if has_prev else 0
            for m in range(hid):
                i = gates[b, t, m]
                f = gates[b, t, hid + m]
                g = gates[b, t, 2 * hid + m]
                o = gates[b, t, 3 * hid + m]
                tc = tcells[b, t, m]
                dht = dh[b, t, m] + dh_next[m]
                dc = dht * o * (1.0 - tc * tc) + dc_next[m]
                c_prev = cells[b, prev, m] if has_prev else 0.0
                dpre[b, t, m] = dc * g * i * (1.0 - i)
                dpre[b, t, hid + m] = dc * c_prev * f * (1.0 - f)
                dpre[b, t, 2 * hid + m] = dc * i * (1.0 - g * g)
                dpre[b, t, 3 * hid + m] = dht * tc * o * (1.0 - o)
                dc_next[m] = dc * f
            if has_prev:
                for m in range(hid):
                    hp = hs[b, prev, m]
                    for j in range(four_h):
                        dwhh[m, j] += hp * dpre[b, t, j]
            for m in range(hid):
                acc = 0.0
                for j in range(four_h):
                    acc += dpre[b, t, j] * w_hh[m, j]
                dh_next[m] = acc
    return dpre, dwhh
