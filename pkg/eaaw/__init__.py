"""Explanation-as-a-watermark: embed, extract and verify multi-bit model watermarks."""
