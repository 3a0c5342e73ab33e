//! Perturbation attacks (stub).
