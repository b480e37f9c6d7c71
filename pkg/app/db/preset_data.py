"""
Built-in simulation scenarios: six Poisson designs (two sizes by three
crossing levels) and fifteen binary designs (less variable at two sizes,
more variable at three, each at three crossing levels).
"""

from app.models.enums import Crossing, OutcomeKind

# (N_IP, N_HCF) -> intercept
POISSON_INTERCEPTS: dict[tuple[int, int], float] = {
    (100, 5): -4.5,
    (1000, 50): -5.5,
}

# variability -> {(N_IP, N_HCF): (intercept, σ_IP)}
BINARY_DESIGNS: dict[str, dict[tuple[int, int], tuple[float, float]]] = {
    "less": {(100, 5): (-5.5, 1.0), (1000, 50): (-7.5, 1.0)},
    "more": {
        (100, 5): (-5.5, 2.5),
        (1000, 50): (-7.5, 2.5),
        (10000, 50): (-9.5, 2.5),
    },
}

SIGMA_HCF = 0.5
SIGMA_IP_POISSON = 1.0


def crossing_params(crossing: Crossing, n_ip: int, n_hcf: int) -> dict:
    """Facility-count parameters of one crossing level."""
    if crossing is Crossing.NESTED:
        return {"lambda_f": 0.25, "m_f": 0.0, "M_f": 1.1}
    if crossing is Crossing.PART_CROSSED:
        return {"lambda_f": 1.0, "m_f": 0.0, "M_f": 0.1 + n_hcf}
    lam = 2.25 if n_ip <= 100 else 25.25
    return {"lambda_f": lam, "m_f": 0.0, "M_f": 0.1 + n_hcf}


def _raw_presets() -> dict[str, dict]:
    out: dict[str, dict] = {}
    for crossing in Crossing:
        tag = crossing.value.lower()
        for (n_ip, n_hcf), b0 in POISSON_INTERCEPTS.items():
            name = f"poisson-{tag}-{n_ip}x{n_hcf}"
            out[name] = {
                "name": name,
                "N_IP": n_ip,
                "N_HCF": n_hcf,
                "crossing": crossing,
                "outcome": OutcomeKind.POISSON_COUNTS,
                "beta": {"beta0": b0},
                "sigma_IP": SIGMA_IP_POISSON,
                "sigma_HCF": SIGMA_HCF,
                **crossing_params(crossing, n_ip, n_hcf),
            }
        for variability, designs in BINARY_DESIGNS.items():
            for (n_ip, n_hcf), (b0, s_ip) in designs.items():
                name = f"binary-{variability}-{tag}-{n_ip}x{n_hcf}"
                out[name] = {
                    "name": name,
                    "N_IP": n_ip,
                    "N_HCF": n_hcf,
                    "crossing": crossing,
                    "outcome": OutcomeKind.BINARY,
                    "beta": {"beta0": b0},
                    "sigma_IP": s_ip,
                    "sigma_HCF": SIGMA_HCF,
                    "include_los_offset": False,
                    **crossing_params(crossing, n_ip, n_hcf),
                }
    return out


PRESETS: dict[str, dict] = _raw_presets()

# shorthand accepted in addition to the canonical names
PRESET_ALIASES: dict[str, str] = {
    "nested": "poisson-nested-100x5",
    "partcrossed": "poisson-partcrossed-100x5",
    "morecrossed": "poisson-morecrossed-100x5",
    "poisson": "poisson-nested-100x5",
    "binary": "binary-less-nested-100x5",
}
