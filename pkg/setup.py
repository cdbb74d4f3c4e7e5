from setuptools import find_packages, setup

setup(
    name="recatvton",
    version="0.0.1",
    description="Desk-scale latent-diffusion virtual try-on conditioning engine",
    url="https://github.com/macxred/recatvton",
    author="Lukas Elmiger",
    python_requires=">=3.10",
    install_requires=[
        "numpy",
        "scipy",
        "pandas",
        "Pillow",
        "matplotlib",
        "consistent_df @ https://github.com/macxred/consistent_df/tarball/main"
    ],
    packages=find_packages(exclude=("tests", "examples")),
    entry_points={
        "console_scripts": ["recatvton=recatvton.cli:main"],
    },
    extras_require={
        "dev": [
            "flake8",
            "flake8-import-order",
            "flake8-docstrings",
            "flake8-bugbear",
            "bandit",
            "pytest",
            "pytest-cov"
        ]
    }
)
