"""On-disk formats: run CSVs with their provenance header, sample matrices and network checkpoints."""
