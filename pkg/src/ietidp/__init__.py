"""IETI-DP solvers for multipatch isogeometric discretizations."""
