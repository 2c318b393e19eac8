"""
Stent Tracker
Landmark-pair stent tracking with graph-based temporal node classification
"""

__version__ = "0.1.0"
