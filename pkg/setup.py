from setuptools import setup, find_packages

setup(
    name="dyadprobit",
    version="1.0.0",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.24",
        "scipy>=1.10",
        "pandas>=2.0",
        "tqdm>=4.65",
        "python-dotenv==1.0.0",
    ],
    extras_require={
        "test": ["pytest>=7.4"],
    },
    entry_points={
        'console_scripts': [
            'dyadprobit=dyadprobit.cli:main',
        ],
    },
)
