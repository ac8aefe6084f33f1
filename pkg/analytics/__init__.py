"""Free-energy, error and distribution-distance diagnostics for trained flows."""
