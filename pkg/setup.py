from setuptools import setup

setup(
    name="solar_defect",
    description="Training, evaluation and explainability of attention-augmented solar panel defect classifiers",
    author="solar_defect developers",
    license="Apache 2.0",
    packages=["solar_defect"],
    keywords=["pytorch", "CBAM", "focal loss", "grad-cam", "solar panel"],
    install_requires=[
        "numpy",
        "scipy",
        "matplotlib>=3.5",
        "torch",
        "torchvision",
        "Pillow>=9.1",
        "scikit-learn",
        "PyYAML",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["solar-defect=solar_defect.cli:console_main"]},
    classifiers=[
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
    ],
)
