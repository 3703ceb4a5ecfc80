"""Single-shot detector with CFE/FFB feature enhancement, built on a small numpy autograd core."""
