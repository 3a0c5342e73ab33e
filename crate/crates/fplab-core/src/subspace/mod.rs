//! Subspace + FSFT (stub).
