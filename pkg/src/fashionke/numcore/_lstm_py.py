"""Pure-numpy LSTM recurrence kernels (fallback for the compiled extension).

Layout is time-major. ``gx`` holds the input contribution ``x_t @ Wx + b``
for every step, so only the recurrent product stays inside the loop. Gate
order along the last axis is input, forget, candidate, output.
"""
import numpy as np


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(gx, wh, mask, h0, c0):
    """Run the masked recurrence; returns (out, hs, cs, gates, tc).

    Masked steps carry the previous state through unchanged and emit zeros.
    """
    T, B, G = gx.shape
    H = G // 4
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    gates = np.empty((T, B, G))
    tc = np.empty((T, B, H))
    out = np.empty((T, B, H))
    hs[0] = h0
    cs[0] = c0
    for t in range(T):
        z = gx[t] + hs[t] @ wh
        a = gates[t]
        a[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
        cn = a[:, H : 2 * H] * cs[t] + a[:, :H] * a[:, 2 * H : 3 * H]
        tc[t] = np.tanh(cn)
        m = mask[t][:, None]
        out[t] = m * (a[:, 3 * H :] * tc[t])
        cs[t + 1] = m * cn + (1.0 - m) * cs[t]
        hs[t + 1] = out[t] + (1.0 - m) * hs[t]
    return out, hs, cs, gates, tc


def lstm_backward(dout, dh_last, dc_last, wh, mask, cs, gates, tc):
    """Backpropagate through :func:`lstm_forward`.

    Returns (dgates, dh0, dc0) where ``dgates`` are gradients with respect to
    the gate pre-activations, shape (T, B, 4H).
    """
    T, B, G = gates.shape
    H = G // 4
    dh = np.array(dh_last, dtype=np.float64)
    dc = np.array(dc_last, dtype=np.float64)
    dg = np.empty((T, B, G))
    for t in range(T - 1, -1, -1):
        m = mask[t][:, None]
        a = gates[t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        dhn = m * (dh + dout[t])
        dcn = m * dc + dhn * o * (1.0 - tc[t] ** 2)
        d = dg[t]
        d[:, :H] = dcn * g * i * (1.0 - i)
        d[:, H : 2 * H] = dcn * cs[t] * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dcn * i * (1.0 - g * g)
        d[:, 3 * H :] = dhn * tc[t] * o * (1.0 - o)
        dh = (1.0 - m) * dh + d @ wh.T
        dc = (1.0 - m) * dc + dcn * f
    return dg, dh, dc
