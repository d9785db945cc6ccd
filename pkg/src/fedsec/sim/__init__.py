"""In-process multi-site federation simulator and load harness."""
