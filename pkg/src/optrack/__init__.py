"""Real-time optimality tracking for parametric non-convex programs."""
