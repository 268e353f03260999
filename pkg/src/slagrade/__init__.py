"""Session-level spoken language assessment grader."""
