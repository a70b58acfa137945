"""Training ReLU networks with a lifted, block multi-convex objective."""
