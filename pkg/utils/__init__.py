"""
Utility modules for the MVP lesion detection toolkit
"""
