"""Second-order KdV approximation of long water waves: modulation hierarchy, approximants, residuals."""
