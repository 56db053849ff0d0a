"""Problem definitions, drivers, studies and the command line interface."""
