"""Personalised reward learning with a shared low-rank adaptation.

Modules: ``linalg`` (SVD, principal angles, diversity), ``mdp`` (tabular
MDPs and occupancy measures), ``data`` (planted truth and preference data),
``reward`` (reward models and likelihood), ``train`` (projected gradient
ascent), ``planner`` (confidence sets and pessimistic planning),
``diagnostics``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
