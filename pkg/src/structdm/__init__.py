"""Few-shot behaviour cloning of structured dialogue policies."""
