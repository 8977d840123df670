"""Compiled explicit update for the thermal grid.

One call performs a full step on rows ``[0, top)``: conduction fluxes,
boundary sink and surface losses, the optional laser term, the enthalpy
update, and the enthalpy -> (temperature, liquid fraction, phase) map.
Loops run in a fixed order, so results are bit-reproducible.
"""
import numpy as np
from numba import njit

EMPTY, POWDER, SOLID, LIQUID = 0, 1, 2, 3
STEFAN_BOLTZMANN = 5.670374419e-8


@njit(cache=True)
def advance(H, T, f, phase, cons, dz, dx, dt, top,
            k_s, k_l, k_p, rho_c, rho_l, t_sol, t_liq, t_amb,
            h_conv, emissivity, loss_area, use_losses, bottom_sink,
            absorbed, col_frac, absorb, absorb_scale, power):
    n_cols = H.shape[1]
    k = np.empty((top, n_cols))
    for r in range(top):
        for c in range(n_cols):
            if phase[r, c] == EMPTY:
                k[r, c] = 0.0
            elif cons[r, c]:
                k[r, c] = k_s + f[r, c] * (k_l - k_s)
            else:
                k[r, c] = k_p
            power[r, c] = 0.0

    for r in range(top):
        for c in range(n_cols - 1):
            ka = k[r, c]
            kb = k[r, c + 1]
            if ka > 0.0 and kb > 0.0:
                g = 2.0 * ka * kb / (ka + kb) * dz[r] / dx
                q = g * (T[r, c + 1] - T[r, c])
                power[r, c] += q
                power[r, c + 1] -= q
    for r in range(top - 1):
        for c in range(n_cols):
            ka = k[r, c]
            kb = k[r + 1, c]
            if ka > 0.0 and kb > 0.0:
                g = 2.0 * dx * ka * kb / (dz[r] * kb + dz[r + 1] * ka)
                q = g * (T[r + 1, c] - T[r, c])
                power[r, c] += q
                power[r + 1, c] -= q
    if bottom_sink:
        for c in range(n_cols):
            if k[0, c] > 0.0:
                power[0, c] += 2.0 * dx * k[0, c] / dz[0] * (t_amb - T[0, c])
    if use_losses:
        t4 = t_amb ** 4
        for r in range(top):
            for c in range(n_cols):
                a = loss_area[r, c]
                if a > 0.0:
                    t = T[r, c]
                    q = h_conv * (t - t_amb) + emissivity * STEFAN_BOLTZMANN * (t ** 4 - t4)
                    power[r, c] -= a * q

    h_sol = rho_c * t_sol
    h_liq = rho_c * t_liq + rho_l
    apparent = rho_c + rho_l / (t_liq - t_sol)
    for r in range(top):
        vol = dx * dz[r]
        for c in range(n_cols):
            if phase[r, c] == EMPTY:
                continue
            dh = power[r, c] / vol
            if absorbed > 0.0:
                dh += absorbed * col_frac[c] * absorb[r, c] * absorb_scale[r]
            h = H[r, c] + dt * dh
            H[r, c] = h
            if h <= h_sol:
                T[r, c] = h / rho_c
                fr = 0.0
            elif h >= h_liq:
                T[r, c] = (h - rho_l) / rho_c
                fr = 1.0
            else:
                T[r, c] = t_sol + (h - h_sol) / apparent
                fr = (h - h_sol) / (h_liq - h_sol)
            f[r, c] = fr
            if fr > 0.0:
                cons[r, c] = True
                phase[r, c] = LIQUID
            elif cons[r, c]:
                phase[r, c] = SOLID
            else:
                phase[r, c] = POWDER
