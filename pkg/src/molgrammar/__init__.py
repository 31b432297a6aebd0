"""Grammar-constrained generation of valid SMILES strings."""
