"""Find the smallest regularization weight that keeps the map invertible.

A ball of radius 1.6 is shrunk onto a ball of radius 1.0, which needs a
volume change of about 4. The search lowers beta_v by decades and then
bisects until ``eps_J <= det grad y <= 1 / eps_J`` is about to fail.

    python3 demos/beta_search.py
"""

from veloreg.config import RegConfig
from veloreg.continuation import BetaSearchParams, search_beta
from veloreg.fields import Grid3
from veloreg.objective import RegistrationProblem
from veloreg.synthetic import ball_pair

m_R, m_T = ball_pair(Grid3.cube(32))
problem = RegistrationProblem(m_R, m_T, RegConfig(beta_v=1.0))
result = search_beta(problem, BetaSearchParams(eps_J=0.25))

print(f"{'beta_v':>10}  {'feasible':>8}  {'det_min':>8}  {'det_max':>8}  iterations")
for t in result.trace:
    print(f"{t.beta_v:10.3g}  {str(t.feasible):>8}  {t.det_min:8.3f}  {t.det_max:8.3f}  {t.iterations}")
print(f"selected beta_v = {result.beta_v:g}")
