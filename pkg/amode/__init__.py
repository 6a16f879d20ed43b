"""
A 超声骨峰定位与解剖区域识别
"""
__version__ = "1.0.0"
