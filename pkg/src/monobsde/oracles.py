"""Closed-form and lattice reference values used to check the solvers."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm


def crr_american_put(spot, strike, rate, vol, maturity, steps=2000):
    """Cox-Ross-Rubinstein binomial value of an American put."""
    dt = maturity / steps
    up = math.exp(vol * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp(rate * dt) - down) / (up - down)
    disc = math.exp(-rate * dt)
    j = np.arange(steps + 1)
    value = np.maximum(strike - spot * up ** (steps - 2 * j), 0.0)
    for i in range(steps - 1, -1, -1):
        j = np.arange(i + 1)
        cont = disc * (p * value[:-1] + (1.0 - p) * value[1:])
        value = np.maximum(cont, strike - spot * up ** (i - 2 * j))
    return float(value[0])


def black_scholes_call(spot, strike, rate, vol, maturity):
    """Price and ``vol * spot * delta`` (the BSDE ``Z``) of a European call."""
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol ** 2) * maturity) / (vol * math.sqrt(maturity))
    d2 = d1 - vol * math.sqrt(maturity)
    price = spot * norm.cdf(d1) - strike * math.exp(-rate * maturity) * norm.cdf(d2)
    return float(price), float(vol * spot * norm.cdf(d1))


def cubic_driver_solution(c, tau):
    """Solution of ``u_t = u^3``, ``u(T) = c`` at time to maturity ``tau``."""
    return c / np.sqrt(1.0 + 2.0 * c * c * np.asarray(tau, dtype=float))


def linear_driver_solution(c, tau, rate=1.0):
    """Solution of ``u_t = rate * u``, ``u(T) = c``."""
    return c * np.exp(-rate * np.asarray(tau, dtype=float))


def heat_gaussian(x, tau, width=1.0, diffusivity=1.0):
    """``u_t + diffusivity * u_xx = 0`` with ``u(T, x) = exp(-x^2 / (2 width^2))``."""
    var = width ** 2 + 2.0 * diffusivity * np.asarray(tau, dtype=float)
    return width / np.sqrt(var) * np.exp(-np.asarray(x, dtype=float) ** 2 / (2.0 * var))


def brownian_indicator_mean(x, s, a=-1.0, b=1.0):
    """``P(x + B_s in [a, b])``; the indicator itself at ``s = 0``."""
    x = np.asarray(x, dtype=float)
    if s == 0:
        return ((x >= a) & (x <= b)).astype(float)
    r = math.sqrt(s)
    return norm.cdf((b - x) / r) - norm.cdf((a - x) / r)
