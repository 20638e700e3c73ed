"""Pure-numpy LSTM recurrence, used when the compiled kernel is unavailable.

Gate blocks are stacked in the order input, forget, cell, output.  With
``zin[t] = Wx x_t + b`` precomputed by the caller::

    z_t = zin[t] + Wh h_{t-1}
    i, f, o = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o);  g = tanh(z_g)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

with zero initial state.  ``lstm_forward`` returns the gate activations,
cell states and hidden states; ``lstm_backward`` takes the upstream
gradient with respect to every ``h_t`` and returns the gradient with
respect to the gate pre-activations (from which the caller derives the
input weight, bias and input gradients) together with ``dL/dWh``.
"""
import numpy as np


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(zin, wh):
    zin = np.asarray(zin, dtype=np.float64)
    T, G = zin.shape
    H = wh.shape[1]
    if G != 4 * H or wh.shape[0] != G:
        raise ValueError("shape mismatch between input projection and recurrent weights")
    acts = np.empty((T, G))
    c = np.empty((T, H))
    h = np.empty((T, H))
    h_prev = np.zeros(H)
    c_prev = np.zeros(H)
    for t in range(T):
        z = zin[t] + wh @ h_prev if t > 0 else zin[t].copy()
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        g = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid(z[3 * H :])
        acts[t, :H] = i
        acts[t, H : 2 * H] = f
        acts[t, 2 * H : 3 * H] = g
        acts[t, 3 * H :] = o
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        c[t] = c_prev
        h[t] = h_prev
    return acts, c, h


def lstm_backward(acts, c, h, wh, dh):
    T, G = acts.shape
    H = wh.shape[1]
    dz = np.zeros((T, G))
    dwh = np.zeros((G, H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i = acts[t, :H]
        f = acts[t, H : 2 * H]
        g = acts[t, 2 * H : 3 * H]
        o = acts[t, 3 * H :]
        tc = np.tanh(c[t])
        dht = dh[t] + dh_next
        dc = dht * o * (1.0 - tc * tc) + dc_next
        c_prev = c[t - 1] if t > 0 else np.zeros(H)
        dz[t, :H] = dc * g * i * (1.0 - i)
        dz[t, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[t, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[t, 3 * H :] = dht * tc * o * (1.0 - o)
        dc_next = dc * f
        if t > 0:
            dh_next = wh.T @ dz[t]
            dwh += np.outer(dz[t], h[t - 1])
    return dz, dwh
