"""Detection math, proxy detector, metrics, scene generation and drift studies."""
