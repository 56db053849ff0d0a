"""Multipatch topology, dof layout and Galerkin assembly."""
