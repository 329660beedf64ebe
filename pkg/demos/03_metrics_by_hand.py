"""
Survival metrics on a five-patient toy cohort
=============================================

Two of five patients are censored. The censoring distribution G is a
Kaplan-Meier fit with the event flags flipped, and it reweights the Brier
score so censored patients still count.
"""

import numpy as np

from scmil.metrics import brier, censoring_km, ibs, kaplan_meier, tdc

durations = np.array([1.0, 1.5, 2.5, 3.0, 4.0])
events = np.array([0, 1, 0, 1, 1])

km = kaplan_meier(durations, events)
g = censoring_km(durations, events)
print("S:", [round(km(t), 4) for t in (1.5, 3.0, 4.0)])
print("G:", [round(g(t), 4) for t in (1.0, 2.5)])

# predicted survival probabilities at t = 2
scdf_at_2 = np.array([0.9, 0.3, 0.8, 0.6, 0.7])
# patient 0 was censored before t: weight 0
# patient 1 died at 1.5: 0.3^2 / G(1.5-) = 0.09 / 0.8
# patients 2-4 are still followed: (1 - s)^2 / G(2) with G(2) = 0.8
print("Brier(2) =", brier(durations, events, scdf_at_2, 2.0), "(by hand: 0.095)")

# a toy exponential model whose hazard is patient specific
rates = np.array([0.1, 0.9, 0.2, 0.4, 0.3])
print("IBS =", round(ibs(durations, events, lambda t: np.exp(-rates * t)), 4))

# concordance: at each death time, is the dying patient ranked riskier
# than everyone who outlived them?
print("TDC =", tdc(durations, events, lambda t: 1 - np.exp(-rates * t)))
print("TDC, reversed ranking =", tdc(durations, events, lambda t: np.exp(-rates * t)))
